//! FER2013 CSV ingestion and deterministic train/validate/test splitting.
//!
//! The CSV header is `emotion,pixels,Usage` (the `Usage` column is optional);
//! `pixels` holds 2304 space-separated integers for a 48x48 grayscale face.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{FerError, Result};
use crate::imgproc::GrayImage;
use crate::label::EmotionLabel;
use crate::model::INPUT_SIZE;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const IMAGE_PIXELS: usize = INPUT_SIZE * INPUT_SIZE;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub image: GrayImage,
    pub label: EmotionLabel,
    /// The CSV `Usage` column, if the source file had one.
    pub usage: Option<String>,
}

impl LabeledImage {
    pub fn new(image: GrayImage, label: EmotionLabel) -> Result<Self> {
        if image.width() != INPUT_SIZE || image.height() != INPUT_SIZE {
            return Err(FerError::shape(format!(
                "labeled images must be {INPUT_SIZE}x{INPUT_SIZE}, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        Ok(LabeledImage {
            image,
            label,
            usage: None,
        })
    }
}

/// Stacks images into a `[B, 1, 48, 48]` batch scaled to `[0, 1]`.
pub fn to_batch<'a>(images: impl IntoIterator<Item = &'a GrayImage>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut count = 0;
    for img in images {
        if img.width() != INPUT_SIZE || img.height() != INPUT_SIZE {
            return Err(FerError::shape(format!(
                "batch images must be {INPUT_SIZE}x{INPUT_SIZE}"
            )));
        }
        data.extend(img.pixels().iter().map(|&p| p as f32 / 255.0));
        count += 1;
    }
    Tensor::new(vec![count, 1, INPUT_SIZE, INPUT_SIZE], data)
}

fn parse_row(line: &str, line_no: usize, has_usage: bool) -> Result<LabeledImage> {
    let err = |message: String| FerError::Parse {
        line: line_no,
        message,
    };
    let fields: Vec<&str> = line.split(',').collect();
    let expected = if has_usage { 3 } else { 2 };
    if fields.len() != expected {
        return Err(err(format!(
            "expected {expected} fields, found {}",
            fields.len()
        )));
    }
    let label_idx: usize = fields[0]
        .trim()
        .parse()
        .map_err(|_| err(format!("emotion {:?} is not an integer", fields[0])))?;
    let label = EmotionLabel::from_index(label_idx)
        .ok_or_else(|| err(format!("emotion {label_idx} outside 0..7")))?;
    let mut pixels = Vec::with_capacity(IMAGE_PIXELS);
    for tok in fields[1].split_ascii_whitespace() {
        let v: u8 = tok
            .parse()
            .map_err(|_| err(format!("pixel {tok:?} is not an integer in 0..=255")))?;
        pixels.push(v);
    }
    if pixels.len() != IMAGE_PIXELS {
        return Err(err(format!(
            "expected {IMAGE_PIXELS} pixels, found {}",
            pixels.len()
        )));
    }
    let image = GrayImage::new(INPUT_SIZE, INPUT_SIZE, pixels)?;
    Ok(LabeledImage {
        image,
        label,
        usage: has_usage.then(|| fields[2].trim().to_string()),
    })
}

/// Parses FER2013 CSV text. Errors carry the 1-based line number.
pub fn parse_fer_csv(reader: impl BufRead) -> Result<Vec<LabeledImage>> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| FerError::Parse {
            line: 1,
            message: e.to_string(),
        })?,
        None => {
            return Err(FerError::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let columns: Vec<String> = header
        .trim()
        .split(',')
        .map(|c| c.trim().to_ascii_lowercase())
        .collect();
    let has_usage = match columns.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["emotion", "pixels", "usage"] => true,
        ["emotion", "pixels"] => false,
        _ => {
            return Err(FerError::Parse {
                line: 1,
                message: format!("missing header \"emotion,pixels,Usage\", found {header:?}"),
            })
        }
    };
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| FerError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_row(line.trim_end_matches('\r'), line_no, has_usage)?);
    }
    Ok(out)
}

pub fn load_fer_csv(path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| FerError::io(path, e))?;
    parse_fer_csv(BufReader::new(file))
}

/// Writes FER2013 CSV with the `Usage` column (`Training` where unknown).
pub fn write_fer_csv(mut w: impl Write, images: &[LabeledImage]) -> std::io::Result<()> {
    writeln!(w, "emotion,pixels,Usage")?;
    for item in images {
        write!(w, "{},", item.label.index())?;
        for (i, p) in item.image.pixels().iter().enumerate() {
            if i > 0 {
                w.write_all(b" ")?;
            }
            write!(w, "{p}")?;
        }
        writeln!(w, ",{}", item.usage.as_deref().unwrap_or("Training"))?;
    }
    Ok(())
}

pub fn save_fer_csv(path: impl AsRef<Path>, images: &[LabeledImage]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| FerError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_fer_csv(&mut w, images)
        .and_then(|_| w.flush())
        .map_err(|e| FerError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<LabeledImage>,
    pub validate: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub seed: u64,
}

/// Split sizes: `⌊N·a/s⌋`, `⌊N·b/s⌋` and the remainder, with `s = a + b + c`.
pub fn split_sizes(n: usize, ratios: (u32, u32, u32)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if a == 0 || b == 0 || c == 0 {
        return Err(FerError::config(format!(
            "split ratios must be positive, got {a}:{b}:{c}"
        )));
    }
    let s = (a + b + c) as usize;
    let train = n * a as usize / s;
    let validate = n * b as usize / s;
    Ok((train, validate, n - train - validate))
}

/// Seeded shuffle followed by contiguous slicing.
pub fn split(data: Vec<LabeledImage>, ratios: (u32, u32, u32), seed: u64) -> Result<SplitDataset> {
    let n = data.len();
    let (n_train, n_val, _) = split_sizes(n, ratios)?;
    if n < 10 {
        return Err(FerError::input(format!(
            "need at least 10 samples to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed).shuffle(&mut order);
    let mut slots: Vec<Option<LabeledImage>> = data.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<LabeledImage> {
        order[range]
            .iter()
            .map(|&i| slots[i].take().expect("each index appears once"))
            .collect()
    };
    let train = take(0..n_train);
    let validate = take(n_train..n_train + n_val);
    let test = take(n_train + n_val..n);
    Ok(SplitDataset {
        train,
        validate,
        test,
        seed,
    })
}

/// Uses the CSV `Usage` column: `Training`, `PublicTest` (validate), `PrivateTest` (test).
pub fn split_by_usage(data: Vec<LabeledImage>) -> Result<SplitDataset> {
    let mut out = SplitDataset {
        train: Vec::new(),
        validate: Vec::new(),
        test: Vec::new(),
        seed: 0,
    };
    for item in data {
        match item.usage.as_deref() {
            Some("Training") => out.train.push(item),
            Some("PublicTest") => out.validate.push(item),
            Some("PrivateTest") => out.test.push(item),
            other => {
                return Err(FerError::input(format!(
                    "cannot split by usage: row has Usage {other:?}"
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros_row(label: usize, n: usize) -> String {
        let px = vec!["0"; n].join(" ");
        format!("{label},{px},Training")
    }

    #[test]
    fn parses_black_happy() {
        let csv = format!("emotion,pixels,Usage\n{}\n", zeros_row(3, 2304));
        let rows = parse_fer_csv(csv.as_bytes()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].label, EmotionLabel::Happy);
        assert!(rows[0].image.pixels().iter().all(|&p| p == 0));
        assert_eq!(rows[0].usage.as_deref(), Some("Training"));
    }

    #[test]
    fn short_row_names_line() {
        let csv = format!(
            "emotion,pixels,Usage\n{}\n{}\n",
            zeros_row(0, 2304),
            zeros_row(1, 2303)
        );
        match parse_fer_csv(csv.as_bytes()) {
            Err(FerError::Parse { line: 3, message }) => assert!(message.contains("2303")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(
            parse_fer_csv(zeros_row(0, 2304).as_bytes()),
            Err(FerError::Parse { line: 1, .. })
        ));
        let bad_label = format!("emotion,pixels,Usage\n{}\n", zeros_row(7, 2304));
        assert!(matches!(
            parse_fer_csv(bad_label.as_bytes()),
            Err(FerError::Parse { line: 2, .. })
        ));
        let bad_px = format!(
            "emotion,pixels,Usage\n0,{} 256,Training\n",
            vec!["0"; 2303].join(" ")
        );
        assert!(parse_fer_csv(bad_px.as_bytes()).is_err());
        let non_int = format!(
            "emotion,pixels,Usage\n0,{} 1.5,Training\n",
            vec!["0"; 2303].join(" ")
        );
        assert!(parse_fer_csv(non_int.as_bytes()).is_err());
    }

    #[test]
    fn split_sizes_floor_floor_remainder() {
        assert_eq!(split_sizes(100, (8, 1, 1)).unwrap(), (80, 10, 10));
        assert_eq!(split_sizes(105, (8, 1, 1)).unwrap(), (84, 10, 11));
        assert!(matches!(split_sizes(100, (8, 0, 1)), Err(FerError::Config(_))));
    }

    #[test]
    fn split_by_usage_column() {
        let mk = |u: &str| LabeledImage {
            usage: Some(u.into()),
            ..LabeledImage::new(GrayImage::filled(48, 48, 0), EmotionLabel::Sad).unwrap()
        };
        let s = split_by_usage(vec![mk("Training"), mk("PublicTest"), mk("PrivateTest"), mk("Training")])
            .unwrap();
        assert_eq!((s.train.len(), s.validate.len(), s.test.len()), (2, 1, 1));
        assert!(split_by_usage(vec![mk("Other")]).is_err());
    }
}
