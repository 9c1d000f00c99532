//! Command-line front end. Every subcommand writes its artifacts under
//! `--out` and echoes its effective configuration into a JSON run record.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

mod analyze;
mod args_file;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::model::ModelConfig;
use crate::objective::{GramReduction, Mode};

pub use args_file::{expand_config, parse_args_file};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const DEFAULT_BETA1_GRID: [f64; 3] = [0.9, 0.99, 0.999];
pub const DEFAULT_MASK_GRID: [f64; 3] = [0.66, 0.76, 0.84];

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(crate::Error),
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 20^3 volumes, 32-wide 2-block encoder.
    Tiny,
    /// 50^3 volumes, 1000-wide 12-block encoder.
    Paper,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Paper => ModelConfig::paper(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cscrl", version, about = "Masked-reconstruction pretraining with Gram-matrix regularization")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-covariance synthetic dataset with a manifest.
    GenData(GenDataArgs),
    /// Masked-reconstruction pretraining.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning from a pretrained checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// Metrics of a fine-tuned classifier on one split.
    Evaluate(EvaluateArgs),
    /// Representation diagnostics.
    Analyze(AnalyzeArgs),
    /// Compare analytic gradients against finite differences on the tiny model.
    GradCheck(GradCheckArgs),
    /// Pretrain, fine-tune and evaluate over a grid of beta1 and mask ratios.
    Sweep(SweepArgs),
}

/// Accepted by every subcommand; consumed before parsing.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ConfigFile {
    /// File of `key = value` lines applied before command-line flags.
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    /// Samples per class, split 60/20/20 into train/val/test.
    #[arg(long, default_value_t = 100)]
    pub n_per_class: usize,
    /// Edge length of the cubic volumes.
    #[arg(long, default_value_t = 20)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.2)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub file: ConfigFile,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PretrainArgs {
    /// Dataset directory (with manifest.csv) or manifest path.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Cscrl)]
    pub mode: Mode,
    #[arg(long, default_value_t = 0.76)]
    pub mask_ratio: f64,
    /// Pixel-loss weight; the semantic weight is (1 - beta1) / 2.
    #[arg(long, default_value_t = 0.99)]
    pub beta1: f64,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    /// Defaults to 40, or a tenth of the epochs for runs of 40 epochs or fewer.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1.5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value_t = GramReduction::OffDiagonal)]
    pub gram_reduction: GramReduction,
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub preset: Preset,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub file: ConfigFile,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(clap::ArgGroup::new("init").required(true).args(["ckpt", "from_scratch"])))]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained checkpoint whose encoder initializes the classifier.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Random initialization instead of a checkpoint.
    #[arg(long)]
    pub from_scratch: bool,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Defaults to 5, or a tenth of the epochs for runs of 5 epochs or fewer.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.75)]
    pub layer_decay: f64,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    pub label_smoothing: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Beta(alpha, alpha) mixup weight; 0 disables mixup.
    #[arg(long, default_value_t = 0.8)]
    pub mixup_alpha: f64,
    #[arg(long, default_value_t = 0.001)]
    pub init_scale: f64,
    /// Architecture for --from-scratch, or for checkpoints without metadata.
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub file: ConfigFile,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Fine-tuned classifier checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: crate::data::Split,
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub preset: Preset,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub file: ConfigFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisKind {
    Attention,
    Hubs,
    Variance,
    Fourier,
    Landscape,
    Reconstruct,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(value_enum)]
    pub kind: AnalysisKind,
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained or fine-tuned checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Split to analyze; the landscape always uses the training split.
    #[arg(long, default_value = "test")]
    pub split: crate::data::Split,
    /// Use at most this many volumes of the split.
    #[arg(long, default_value_t = 16)]
    pub max_samples: usize,
    /// Encoder block for attention and hubs, counted from 1.
    #[arg(long, default_value_t = 1)]
    pub layer: usize,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Landscape points per axis.
    #[arg(long, default_value_t = 41)]
    pub steps: usize,
    /// Landscape half-width along each direction.
    #[arg(long, default_value_t = 1.0)]
    pub range: f64,
    /// L2 coefficient of the landscape objective.
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.76)]
    pub mask_ratio: f64,
    /// Seeds the landscape directions and reconstruction masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub preset: Preset,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub file: ConfigFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GradTarget {
    Pretrain,
    Finetune,
    All,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradCheckArgs {
    #[arg(long, value_enum, default_value_t = GradTarget::All)]
    pub target: GradTarget,
    /// Pretraining modes checked when the target includes pretraining; both by default.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, value_enum, default_value_t = GramReduction::OffDiagonal)]
    pub gram_reduction: GramReduction,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for gradcheck.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub file: ConfigFile,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated beta1 values.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = DEFAULT_BETA1_GRID)]
    pub beta1: Vec<f64>,
    /// Comma-separated mask ratios.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = DEFAULT_MASK_GRID)]
    pub mask_ratio: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Mode::Cscrl)]
    pub mode: Mode,
    #[arg(long, default_value_t = 300)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub finetune_epochs: usize,
    #[arg(long, default_value = "test")]
    pub split: crate::data::Split,
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub file: ConfigFile,
}

/// Thread count from `CSCRL_THREADS`; unset or 0 means one per core.
fn thread_count() -> CliResult<usize> {
    match std::env::var("CSCRL_THREADS") {
        Ok(s) if !s.trim().is_empty() => s
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("CSCRL_THREADS must be a non-negative integer, got {s:?}"))),
        _ => Ok(0),
    }
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::GenData(a) => run::gen_data(&a),
        Command::Pretrain(a) => run::pretrain(&a),
        Command::Finetune(a) => run::finetune(&a),
        Command::Evaluate(a) => run::evaluate(&a),
        Command::Analyze(a) => analyze::analyze(&a),
        Command::GradCheck(a) => run::grad_check(&a),
        Command::Sweep(a) => run::sweep(&a),
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = thread_count().and_then(|n| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(crate::Error::Config(format!("thread pool: {e}"))))?;
        pool.install(|| execute(cli.command))
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn default_sweep_grid_is_three_by_three() {
        let cli = Cli::try_parse_from(["cscrl", "sweep", "--data", "d"]).unwrap();
        let Command::Sweep(a) = cli.command else { panic!() };
        assert_eq!(a.beta1, vec![0.9, 0.99, 0.999]);
        assert_eq!(a.mask_ratio, vec![0.66, 0.76, 0.84]);
    }

    #[test]
    fn later_flags_override_earlier_ones() {
        let cli = Cli::try_parse_from(["cscrl", "pretrain", "--data", "d", "--epochs", "7", "--epochs", "3"]).unwrap();
        let Command::Pretrain(a) = cli.command else { panic!() };
        assert_eq!(a.epochs, 3);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(dispatch(["cscrl", "pretrain"]), EXIT_USAGE);
        assert_eq!(dispatch(["cscrl", "bogus"]), EXIT_USAGE);
        assert_eq!(dispatch(["cscrl", "pretrain", "--data", "d", "--no-such-flag"]), EXIT_USAGE);
        assert_eq!(dispatch(["cscrl", "finetune", "--data", "d"]), EXIT_USAGE);
        assert_eq!(dispatch(["cscrl", "--help"]), EXIT_OK);
    }
}
