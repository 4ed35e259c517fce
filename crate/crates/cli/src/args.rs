use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "quantcal",
    version,
    about = "Post-training int8 quantization with pluggable calibration data"
)]
pub struct Cli {
    /// Seed for every random choice (calibration sampling, ranking subsets, fractals).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a model with the default or accuracy-aware flow.
    Quantize(QuantizeArgs),
    /// Top-1 accuracy of a model (optionally quantized) on a labeled corpus.
    Eval(EvalArgs),
    /// Inception Score of an image corpus under a classifier.
    Score(ScoreArgs),
    /// Generate a labeled IFS fractal corpus.
    Fractals(FractalArgs),
    /// Convert CIFAR-10 binary batches into the corpus layout.
    ConvertCifar(ConvertArgs),
    /// Run every calibration set under every quantization mode and tabulate the drops.
    Matrix(MatrixArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Default,
    AccuracyAware,
}

#[derive(Debug, Args)]
pub struct QuantFlags {
    /// JSON or TOML file with fold_bn, calibration_samples, seed, max_drop, ranking_subset, max_reverts.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Keep batchnorm layers unfolded.
    #[arg(long)]
    pub no_fold_bn: bool,

    #[arg(long)]
    pub calibration_samples: Option<usize>,

    /// Accuracy-drop budget in percentage points.
    #[arg(long)]
    pub max_drop: Option<f64>,

    #[arg(long)]
    pub ranking_subset: Option<usize>,

    #[arg(long)]
    pub max_reverts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,

    /// Calibration corpus directory.
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long, value_enum, default_value = "default")]
    pub mode: Mode,

    /// Labeled corpus for a held-out evaluation of the result.
    #[arg(long)]
    pub test: Option<PathBuf>,

    #[command(flatten)]
    pub quant: QuantFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,

    /// Quantization sidecar (`<name>.quant.json`).
    #[arg(long)]
    pub quant: Option<PathBuf>,

    #[arg(long)]
    pub images: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub classifier: PathBuf,

    #[arg(long)]
    pub images: PathBuf,

    #[arg(long, default_value_t = 1)]
    pub splits: usize,
}

#[derive(Debug, Args)]
pub struct FractalArgs {
    #[arg(long)]
    pub count: usize,

    #[arg(long)]
    pub classes: usize,

    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// CIFAR-10 binary batch files.
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[arg(long)]
    pub model: PathBuf,

    /// `NAME=DIR` or `NAME=@gen:seed=S[,count=N,classes=K,size=P]`; repeatable.
    #[arg(long = "calib", required = true)]
    pub calib: Vec<String>,

    /// Labeled evaluation corpus; defaults to the first directory calibration set.
    #[arg(long)]
    pub test: Option<PathBuf>,

    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Mode::Default, Mode::AccuracyAware])]
    pub modes: Vec<Mode>,

    #[command(flatten)]
    pub quant: QuantFlags,
}
