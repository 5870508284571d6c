//! Netpbm reader/writer. Writes binary PGM (`P5`, maxval 255); reads `P5`,
//! ASCII `P2`, and binary `P6` (converted to gray).

use std::path::Path;

use crate::error::{FerError, Result};
use crate::imgproc::GrayImage;

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FerError::input(format!("PGM: missing or invalid {what}")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let magic = bytes
        .get(..2)
        .ok_or_else(|| FerError::input("PGM: file too short"))?;
    let kind = match magic {
        b"P5" => 5,
        b"P2" => 2,
        b"P6" => 6,
        _ => return Err(FerError::input("PGM: unsupported magic (expected P5, P2 or P6)")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(FerError::input("PGM: zero dimension"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(FerError::input(format!(
            "PGM: maxval {maxval} unsupported (1..=255)"
        )));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| FerError::input("PGM: dimensions overflow"))?;

    let samples: Vec<usize> = if kind == 2 {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(h.number("sample")?);
        }
        v
    } else {
        // Exactly one whitespace byte separates the header from the raster.
        if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(FerError::input("PGM: missing separator before raster"));
        }
        let start = h.pos + 1;
        let channels = if kind == 6 { 3 } else { 1 };
        let raster = bytes
            .get(start..start + n * channels)
            .ok_or_else(|| FerError::input("PGM: raster truncated"))?;
        if kind == 6 {
            raster
                .chunks_exact(3)
                .map(|p| {
                    let l = 299 * p[0] as usize + 587 * p[1] as usize + 114 * p[2] as usize;
                    (l + 500) / 1000
                })
                .collect()
        } else {
            raster.iter().map(|&p| p as usize).collect()
        }
    };
    if let Some(&bad) = samples.iter().find(|&&s| s > maxval) {
        return Err(FerError::input(format!(
            "PGM: sample {bad} exceeds maxval {maxval}"
        )));
    }
    let pixels = if maxval == 255 {
        samples.into_iter().map(|s| s as u8).collect()
    } else {
        samples
            .into_iter()
            .map(|s| ((s * 255 + maxval / 2) / maxval) as u8)
            .collect()
    };
    GrayImage::new(width, height, pixels)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| FerError::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| FerError::input(format!("{}: {e}", path.display())))
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)).map_err(|e| FerError::io(path, e))
}
