//! The `fer` command: training, evaluation, stream simulation and augmentation previews.
//!
//! [`run`] takes the argument list and two writers so that commands can be
//! driven in-process by tests. Exit codes: 0 success, 1 usage or configuration
//! error, 2 data, checkpoint or I/O error, 3 training failure.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use fer_core::augment::{augment_indexed, AugmentConfig};
use fer_core::checkpoint::{load_checkpoint, save_checkpoint};
use fer_core::dataset::{load_fer_csv, split, split_by_usage, LabeledImage, SplitDataset};
use fer_core::gate::{threshold_for, GateState, SceneType};
use fer_core::imgproc::{gaussian3x3, normalize, resize_bilinear, GrayImage};
use fer_core::metrics::{render_confusion, render_metrics_table};
use fer_core::model::{FerConfig, INPUT_SIZE};
use fer_core::pgm::{read_pgm, write_pgm};
use fer_core::trainer::{
    evaluate, fine_tune_stage2_with_progress, train_with_progress, Evaluation, Progress,
    TrainConfig,
};
use fer_core::{FerError, FerModel};

use crate::config::ConfigFile;

const SPLIT_RATIOS: (u32, u32, u32) = (8, 1, 1);
const DEFAULT_TAU: f64 = 4.0;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(FerError),
    #[error(transparent)]
    Training(FerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::Training(_) => 3,
        }
    }
}

/// Training-phase errors: data problems stay exit 2, everything else is a training failure.
fn training_error(e: FerError) -> CliError {
    match e {
        FerError::Io { .. } | FerError::Parse { .. } | FerError::Input(_) => CliError::Data(e),
        other => CliError::Training(other),
    }
}

fn config_error(e: FerError) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "fer", version, about = "Facial expression recognition on 48x48 grayscale faces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    /// 64/128/512/512 conv channels, 256/256 dense units.
    Default,
    /// 8/8/8/8 conv channels, 16/16 dense units.
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Validate,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a FER2013-format CSV, train, and write a checkpoint plus history CSV.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a FER2013-format CSV.
    Eval(EvalArgs),
    /// Run scene-change-gated inference over a directory of PGM frames.
    Stream(StreamArgs),
    /// Write augmented variants of one image.
    Augment(AugmentArgs),
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Flat `key = value` file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// Stage-2 epochs with the conv blocks frozen, at a tenth of the learning rate.
    #[arg(long)]
    pub finetune: Option<usize>,
    /// History CSV path; defaults to `<out>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Use the CSV's Usage column instead of a seeded 8:1:1 split.
    #[arg(long)]
    pub use_csv_split: bool,
    #[arg(long)]
    pub no_augment: bool,
    /// Suppress per-epoch progress on standard error.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Split seed; must match the one used for training to recover its test set.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub use_csv_split: bool,
}

#[derive(Debug, clap::Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of PGM frames, read in lexicographic filename order.
    #[arg(long)]
    pub frames: PathBuf,
    /// Per-pixel scene-change tolerance in gray levels; the threshold is thr * width * height.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub thr: f64,
    #[arg(long)]
    pub no_denoise: bool,
}

#[derive(Debug, clap::Args)]
pub struct AugmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{rendered}");
                1
            } else {
                let _ = write!(out, "{rendered}");
                0
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out, err),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Stream(a) => cmd_stream(&a, out),
        Command::Augment(a) => cmd_augment(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

/// Everything `train` needs after merging defaults, config file and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub model: FerConfig,
    pub train: TrainConfig,
    pub finetune_epochs: Option<usize>,
    pub freeze_first_dense: bool,
}

pub const TRAIN_KEYS: &[&str] = &[
    "arch",
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "dropout",
    "kernel_size",
    "conv_channels",
    "dense_sizes",
    "augment",
    "max_rotation",
    "brightness_min",
    "brightness_max",
    "flip_prob",
    "finetune_epochs",
    "freeze_first_dense",
];

pub const AUGMENT_KEYS: &[&str] = &[
    "seed",
    "count",
    "max_rotation",
    "brightness_min",
    "brightness_max",
    "flip_prob",
];

fn parse_arch(text: &str) -> Result<Arch, CliError> {
    Arch::from_str(text, true).map_err(|_| {
        CliError::Usage(format!("unknown architecture `{text}` (expected default or reduced)"))
    })
}

fn base_config(arch: Arch) -> FerConfig {
    match arch {
        Arch::Default => FerConfig::default(),
        Arch::Reduced => FerConfig::reduced(),
    }
}

fn apply_augment_keys(file: &ConfigFile, a: &mut AugmentConfig) -> Result<(), CliError> {
    if let Some(v) = file.value("max_rotation")? {
        a.max_rotation_deg = v;
    }
    if let Some(v) = file.value("brightness_min")? {
        a.brightness_min = v;
    }
    if let Some(v) = file.value("brightness_max")? {
        a.brightness_max = v;
    }
    if let Some(v) = file.value("flip_prob")? {
        a.flip_prob = v;
    }
    Ok(())
}

impl TrainSettings {
    /// Defaults, then the config file, then explicit flags.
    pub fn resolve(args: &TrainArgs, file: &ConfigFile) -> Result<Self, CliError> {
        file.check_keys(TRAIN_KEYS)?;
        let arch = match (args.arch, file.get("arch")) {
            (Some(a), _) => a,
            (None, Some(e)) => parse_arch(&e.value)?,
            (None, None) => Arch::Default,
        };
        let mut model = base_config(arch);
        let mut train = TrainConfig::default();
        let mut aug = AugmentConfig::default();
        let mut use_augment = true;
        let mut finetune_epochs = None;
        let mut freeze_first_dense = true;

        if let Some(v) = file.value::<u64>("seed")? {
            train.seed = v;
        }
        if let Some(v) = file.value("epochs")? {
            train.epochs = v;
        }
        if let Some(v) = file.value("batch_size")? {
            train.batch_size = v;
        }
        if let Some(v) = file.value("learning_rate")? {
            train.learning_rate = v;
        }
        if let Some(v) = file.value("momentum")? {
            train.momentum = v;
        }
        if let Some(v) = file.value("dropout")? {
            model.dropout = v;
        }
        if let Some(v) = file.value("kernel_size")? {
            model.kernel_size = v;
        }
        if let Some(v) = file.list("conv_channels")? {
            model.conv_channels = v;
        }
        if let Some(v) = file.list("dense_sizes")? {
            model.dense_sizes = v;
        }
        if let Some(v) = file.value("augment")? {
            use_augment = v;
        }
        apply_augment_keys(file, &mut aug)?;
        if let Some(v) = file.value("finetune_epochs")? {
            finetune_epochs = Some(v);
        }
        if let Some(v) = file.value("freeze_first_dense")? {
            freeze_first_dense = v;
        }

        if let Some(v) = args.seed {
            train.seed = v;
        }
        if let Some(v) = args.epochs {
            train.epochs = v;
        }
        if let Some(v) = args.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = args.lr {
            train.learning_rate = v;
        }
        if args.finetune.is_some() {
            finetune_epochs = args.finetune;
        }
        if args.no_augment {
            use_augment = false;
        }

        model.seed = train.seed;
        aug.seed = train.seed;
        train.augment = use_augment.then_some(aug);
        model.validate().map_err(config_error)?;
        train.validate().map_err(config_error)?;
        if finetune_epochs == Some(0) {
            return Err(CliError::Usage("--finetune needs at least 1 epoch".into()));
        }
        Ok(TrainSettings {
            model,
            train,
            finetune_epochs,
            freeze_first_dense,
        })
    }
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, CliError> {
    path.map_or_else(|| Ok(ConfigFile::default()), ConfigFile::load)
}

fn load_splits(data: &Path, use_csv_split: bool, seed: u64) -> Result<SplitDataset, CliError> {
    let samples = load_fer_csv(data).map_err(CliError::Data)?;
    let splits = if use_csv_split {
        split_by_usage(samples)
    } else {
        split(samples, SPLIT_RATIOS, seed)
    };
    splits.map_err(CliError::Data)
}

fn report(eval: &Evaluation, heading: &str) -> String {
    format!(
        "{heading} accuracy: {:.3}\n\n{}\n{}",
        eval.accuracy,
        render_confusion(&eval.confusion),
        render_metrics_table(&eval.confusion)
    )
}

fn progress_line(stage: &str, total: usize, p: Progress) -> Option<String> {
    match p {
        Progress::Epoch(r) => Some(format!(
            "{stage} epoch {}/{total}: loss {:.4}, train acc {:.3}, val acc {:.3}",
            r.epoch, r.mean_loss, r.train_accuracy, r.val_accuracy
        )),
        Progress::Batch { .. } => None,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn default_history_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".history.csv");
    PathBuf::from(s)
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let file = load_config(args.config.as_deref())?;
    let settings = TrainSettings::resolve(args, &file)?;
    let splits = load_splits(&args.data, args.use_csv_split, settings.train.seed)?;
    if splits.test.is_empty() {
        return Err(CliError::Data(FerError::Input("the test split is empty".into())));
    }
    let quiet = args.quiet;
    let mut log = |stage: &str, total: usize, p: Progress| {
        if let Some(line) = progress_line(stage, total, p).filter(|_| !quiet) {
            let _ = writeln!(err, "{line}");
        }
    };

    let mut model = FerModel::new(settings.model.clone()).map_err(config_error)?;
    let epochs = settings.train.epochs;
    let mut history = train_with_progress(&mut model, &splits, &settings.train, |p| {
        log("stage 1", epochs, p)
    })
    .map_err(training_error)?;

    if let Some(ft) = settings.finetune_epochs {
        let cfg = TrainConfig {
            epochs: ft,
            ..settings.train.clone()
        };
        let stage2 = fine_tune_stage2_with_progress(
            &mut model,
            &splits,
            &cfg,
            settings.freeze_first_dense,
            |p| log("stage 2", ft, p),
        )
        .map_err(training_error)?;
        // Stage-2 epochs continue the numbering of stage 1.
        history.epochs.extend(stage2.epochs.into_iter().map(|mut r| {
            r.epoch += epochs;
            r
        }));
    }

    save_checkpoint(&model, &args.out).map_err(CliError::Data)?;
    let history_path = args
        .history
        .clone()
        .unwrap_or_else(|| default_history_path(&args.out));
    write_file(&history_path, history.to_csv().as_bytes())?;

    let eval = evaluate(&model, &splits.test).map_err(training_error)?;
    emit(
        out,
        &format!(
            "checkpoint: {}\nhistory: {}\n{} parameters, {} train / {} validate / {} test samples\n\n{}",
            args.out.display(),
            history_path.display(),
            model.parameter_count(),
            splits.train.len(),
            splits.validate.len(),
            splits.test.len(),
            report(&eval, "test")
        ),
    )
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_checkpoint(&args.model).map_err(CliError::Data)?;
    let splits = load_splits(&args.data, args.use_csv_split, args.seed)?;
    let (name, data): (&str, Vec<LabeledImage>) = match args.split {
        SplitName::Train => ("train", splits.train),
        SplitName::Validate => ("validate", splits.validate),
        SplitName::Test => ("test", splits.test),
        SplitName::All => (
            "all",
            [splits.train, splits.validate, splits.test].concat(),
        ),
    };
    let eval = evaluate(&model, &data).map_err(CliError::Data)?;
    emit(
        out,
        &format!("split: {name} ({} samples)\n{}", data.len(), report(&eval, name)),
    )
}

/// PGM-family files in `dir`, sorted by file name.
fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let io = |source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let is_frame = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "pnm" | "ppm"));
        if is_frame && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if paths.is_empty() {
        return Err(CliError::Data(FerError::Input(format!(
            "no .pgm frames in {}",
            dir.display()
        ))));
    }
    Ok(paths)
}

fn with_path(path: &Path, e: FerError) -> CliError {
    match e {
        e @ FerError::Io { .. } => CliError::Data(e),
        other => CliError::Data(FerError::Input(format!("{}: {other}", path.display()))),
    }
}

pub fn cmd_stream(args: &StreamArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.thr.is_nan() || args.thr < 0.0 {
        return Err(CliError::Usage(format!("--thr must be >= 0, got {}", args.thr)));
    }
    let model = load_checkpoint(&args.model).map_err(CliError::Data)?;
    let paths = frame_paths(&args.frames)?;
    let mut gate: Option<GateState> = None;
    let mut body = String::from("t,sad,scene_type,label,model_invoked\n");

    for (t, path) in paths.iter().enumerate() {
        let raw = read_pgm(path).map_err(|e| with_path(path, e))?;
        let frame = if args.no_denoise { raw } else { gaussian3x3(&raw) };
        let state = match &mut gate {
            Some(g) => g,
            None => gate.insert(
                GateState::new(threshold_for(args.thr, frame.width(), frame.height()))
                    .map_err(config_error)?,
            ),
        };
        let decision = state
            .step(&frame, |img: &GrayImage| -> Result<_, FerError> {
                let small = resize_bilinear(img, INPUT_SIZE, INPUT_SIZE)?;
                Ok(model.predict(&normalize(&small)?)?.0)
            })
            .map_err(|e| with_path(path, e))?;
        body.push_str(&format!(
            "{t},{},{},{},{}\n",
            decision.sad.map_or_else(String::new, |s| s.to_string()),
            match decision.scene {
                SceneType::Change => 1,
                SceneType::Static => 0,
            },
            decision.label,
            u8::from(decision.model_invoked)
        ));
    }

    let g = gate.expect("at least one frame was processed");
    body.push_str(&format!(
        "# frames {}, model invocations {}, invocation ratio {:.3}\n",
        g.frames_seen(),
        g.invocations(),
        g.invocations() as f64 / g.frames_seen() as f64
    ));
    emit(out, &body)
}

pub fn cmd_augment(args: &AugmentArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let file = load_config(args.config.as_deref())?;
    file.check_keys(AUGMENT_KEYS)?;
    let mut cfg = AugmentConfig::default();
    apply_augment_keys(&file, &mut cfg)?;
    cfg.seed = args.seed.or(file.value("seed")?).unwrap_or(0);
    let count = args.count.or(file.value("count")?).unwrap_or(8);
    cfg.validate().map_err(config_error)?;

    let img = read_pgm(&args.input).map_err(|e| with_path(&args.input, e))?;
    let face = resize_bilinear(&img, INPUT_SIZE, INPUT_SIZE).map_err(|e| with_path(&args.input, e))?;
    std::fs::create_dir_all(&args.out).map_err(|source| CliError::Io {
        path: args.out.clone(),
        source,
    })?;
    let stem = args
        .input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let mut listing = String::new();
    for i in 0..count {
        let path = args.out.join(format!("{stem}_aug{i:03}.pgm"));
        write_pgm(&path, &augment_indexed(&face, &cfg, i as u64)).map_err(CliError::Data)?;
        listing.push_str(&format!("{}\n", path.display()));
    }
    emit(out, &listing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(extra: &[&str]) -> TrainArgs {
        let mut v = vec!["fer", "train", "--data", "d.csv", "--out", "m.ckpt"];
        v.extend_from_slice(extra);
        match Cli::try_parse_from(v).unwrap().command {
            Command::Train(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_config_file() {
        let file = ConfigFile::parse("epochs = 5\nlearning_rate = 0.1\narch = reduced\n").unwrap();
        let s = TrainSettings::resolve(&args(&["--epochs", "2"]), &file).unwrap();
        assert_eq!(s.train.epochs, 2);
        assert_eq!(s.train.learning_rate, 0.1);
        assert_eq!(s.model.conv_channels, [8, 8, 8, 8]);
        let s = TrainSettings::resolve(&args(&["--arch", "default"]), &file).unwrap();
        assert_eq!(s.model.conv_channels, [64, 128, 512, 512]);
    }

    #[test]
    fn seed_drives_model_and_augmentation() {
        let s = TrainSettings::resolve(&args(&["--seed", "9"]), &ConfigFile::default()).unwrap();
        assert_eq!(s.model.seed, 9);
        assert_eq!(s.train.seed, 9);
        assert_eq!(s.train.augment.unwrap().seed, 9);
        let s = TrainSettings::resolve(&args(&["--no-augment"]), &ConfigFile::default()).unwrap();
        assert!(s.train.augment.is_none());
    }

    #[test]
    fn invalid_settings_are_usage_errors() {
        let file = ConfigFile::parse("epoch = 5\n").unwrap();
        assert_eq!(TrainSettings::resolve(&args(&[]), &file).unwrap_err().exit_code(), 1);
        let file = ConfigFile::parse("kernel_size = 4\n").unwrap();
        assert_eq!(TrainSettings::resolve(&args(&[]), &file).unwrap_err().exit_code(), 1);
        let e = TrainSettings::resolve(&args(&["--lr=-1"]), &ConfigFile::default()).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn exit_code_map() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 1);
        assert_eq!(CliError::Data(FerError::Input(String::new())).exit_code(), 2);
        assert_eq!(training_error(FerError::Training(String::new())).exit_code(), 3);
        assert_eq!(training_error(FerError::Input(String::new())).exit_code(), 2);
    }
}
