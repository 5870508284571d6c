use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fer_core::checkpoint::load_checkpoint;
use fer_core::dataset::save_fer_csv;
use fer_core::imgproc::GrayImage;
use fer_core::pgm::{read_pgm, write_pgm};
use fer_core::synth::synthetic_fer;
use fer_core::{EmotionLabel, RngState};
use tempfile::TempDir;

fn fer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fer"))
        .args(args)
        .output()
        .expect("spawn fer")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv(dir: &TempDir, n: usize) -> PathBuf {
    let path = dir.path().join("faces.csv");
    save_fer_csv(&path, &synthetic_fer(n, 21)).unwrap();
    path
}

/// Trains a reduced model on a 50-row CSV and returns the checkpoint path.
fn trained(dir: &TempDir, extra: &[&str]) -> PathBuf {
    let data = csv(dir, 50);
    let out = dir.path().join("model.ckpt");
    let mut args = vec![
        "train", "--data", s(&data), "--out", s(&out), "--arch", "reduced", "--epochs", "2",
        "--batch-size", "16", "--seed", "5", "--quiet",
    ];
    args.extend_from_slice(extra);
    let o = fer(&args);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    out
}

#[test]
fn missing_data_is_a_usage_error() {
    let o = fer(&["train", "--out", "x.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert!(stdout(&o).is_empty());
}

#[test]
fn help_goes_to_stdout() {
    let o = fer(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for cmd in ["train", "eval", "stream", "augment"] {
        assert!(stdout(&o).contains(cmd));
    }
}

#[test]
fn train_writes_a_loadable_checkpoint_and_history() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(&dir, &[]);
    let model = load_checkpoint(&ckpt).unwrap();
    assert_eq!(model.config().conv_channels, [8, 8, 8, 8]);
    let history = std::fs::read_to_string(dir.path().join("model.ckpt.history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,train_acc,val_acc,loss");
    assert_eq!(lines.len(), 3);
}

#[test]
fn train_prints_test_metrics() {
    let dir = TempDir::new().unwrap();
    let data = csv(&dir, 50);
    let out = dir.path().join("m.ckpt");
    let o = fer(&[
        "train", "--data", s(&data), "--out", s(&out), "--arch", "reduced", "--epochs", "1",
        "--finetune", "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("test accuracy: "));
    assert!(text.contains("Precision"));
    assert!(stderr(&o).contains("stage 2 epoch 1/1"));
    let history = std::fs::read_to_string(dir.path().join("m.ckpt.history.csv")).unwrap();
    assert!(history.lines().nth(2).unwrap().starts_with("2,"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let data = csv(&dir, 20);
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "# settings\nepochs = 1\nlearnin_rate = 0.1\n").unwrap();
    let o = fer(&[
        "train", "--data", s(&data), "--out", s(&dir.path().join("m.ckpt")), "--config", s(&cfg),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learnin_rate"));
}

#[test]
fn bad_csv_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "emotion,pixels,Usage\n9,1 2 3,Training\n").unwrap();
    let o = fer(&["train", "--data", s(&data), "--out", s(&dir.path().join("m.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"));
}

#[test]
fn eval_reports_all_labels_in_order() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(&dir, &[]);
    let data = dir.path().join("faces.csv");
    let o = fer(&["eval", "--model", s(&ckpt), "--data", s(&data), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("split: test (5 samples)"));
    let table = &text[text.find("label").unwrap()..];
    let mut pos = 0;
    for l in EmotionLabel::ALL {
        let at = table[pos..].find(l.name()).expect("label listed") + pos;
        assert!(at >= pos);
        pos = at;
    }
}

#[test]
fn memorized_training_split_scores_one() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("tiny.csv");
    save_fer_csv(&data, &synthetic_fer(10, 3)).unwrap();
    let out = dir.path().join("m.ckpt");
    let o = fer(&[
        "train", "--data", s(&data), "--out", s(&out), "--arch", "reduced", "--epochs", "300",
        "--batch-size", "8", "--no-augment", "--seed", "1", "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = fer(&["eval", "--model", s(&out), "--data", s(&data), "--split", "train", "--seed", "1"]);
    assert!(stdout(&o).contains("train accuracy: 1.000"), "{}", stdout(&o));
}

#[test]
fn corrupted_checkpoint_is_reported() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(&dir, &[]);
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let data = dir.path().join("faces.csv");
    let o = fer(&["eval", "--model", s(&ckpt), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("truncated checkpoint"));
}

fn write_frames(dir: &Path, frames: &[GrayImage]) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, f) in frames.iter().enumerate() {
        write_pgm(dir.join(format!("frame{i:04}.pgm")), f).unwrap();
    }
}

fn noisy(base: &GrayImage, seed: u64) -> GrayImage {
    let mut rng = RngState::new(seed);
    GrayImage::from_fn(base.width(), base.height(), |x, y| {
        (base.get(x, y) as i32 + rng.below(5) as i32 - 2).clamp(0, 255) as u8
    })
}

#[test]
fn identical_frames_invoke_the_model_once() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(&dir, &[]);
    let face = synthetic_fer(1, 8)[0].image.clone();
    let frames = dir.path().join("frames");
    write_frames(&frames, &vec![face; 10]);
    let o = fer(&["stream", "--model", s(&ckpt), "--frames", s(&frames)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,sad,scene_type,label,model_invoked");
    assert_eq!(lines.len(), 12);
    assert!(lines[1].starts_with("0,,1,"));
    assert!(lines[2].starts_with("1,0,0,"));
    assert!(lines[11].contains("model invocations 1, invocation ratio 0.100"));
}

#[test]
fn zero_threshold_and_denoise_flag() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(&dir, &[]);
    let face = synthetic_fer(1, 8)[0].image.clone();
    let frames: Vec<GrayImage> = (0..6).map(|i| noisy(&face, i)).collect();
    let fdir = dir.path().join("frames");
    write_frames(&fdir, &frames);

    let o = fer(&["stream", "--model", s(&ckpt), "--frames", s(&fdir), "--thr", "0"]);
    assert_eq!(o.status.code(), Some(0));
    let denoised = stdout(&o);
    assert!(denoised.contains("invocation ratio 1.000"));

    let o = fer(&["stream", "--model", s(&ckpt), "--frames", s(&fdir), "--thr", "0", "--no-denoise"]);
    let raw = stdout(&o);
    assert_eq!(raw.lines().count(), denoised.lines().count());
    assert_eq!(raw.lines().next(), denoised.lines().next());
    let sad_col = |t: &str| -> Vec<String> {
        t.lines().skip(2).filter(|l| !l.starts_with('#')).map(|l| l.split(',').nth(1).unwrap().to_string()).collect()
    };
    assert_ne!(sad_col(&raw), sad_col(&denoised));
}

#[test]
fn malformed_frame_is_named() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(&dir, &[]);
    let fdir = dir.path().join("frames");
    write_frames(&fdir, &[GrayImage::filled(48, 48, 9)]);
    std::fs::write(fdir.join("frame0001.pgm"), b"P5\n48 48\n255\nshort").unwrap();
    let o = fer(&["stream", "--model", s(&ckpt), "--frames", s(&fdir)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("frame0001.pgm"));
}

#[test]
fn augment_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("face.pgm");
    write_pgm(&input, &synthetic_fer(1, 2)[0].image).unwrap();
    let run = |out: &str| {
        let out = dir.path().join(out);
        let o = fer(&["augment", "--in", s(&input), "--out", s(&out), "--seed", "4", "--count", "8"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let mut files: Vec<PathBuf> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a.len(), 8);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        let img = read_pgm(x).unwrap();
        assert_eq!((img.width(), img.height()), (48, 48));
    }
}

#[test]
fn degenerate_augmentation_copies_input() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("face.pgm");
    let face = synthetic_fer(1, 2)[0].image.clone();
    write_pgm(&input, &face).unwrap();
    let cfg = dir.path().join("aug.cfg");
    std::fs::write(&cfg, "max_rotation = 0\nbrightness_min = 1\nbrightness_max = 1\nflip_prob = 0\n").unwrap();
    let out = dir.path().join("out");
    let o = fer(&["augment", "--in", s(&input), "--out", s(&out), "--count", "3", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for e in std::fs::read_dir(&out).unwrap() {
        assert_eq!(read_pgm(e.unwrap().path()).unwrap(), face);
    }
}

#[test]
fn augment_missing_input_is_io_error() {
    let dir = TempDir::new().unwrap();
    let o = fer(&["augment", "--in", s(&dir.path().join("nope.pgm")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.pgm"));
}
