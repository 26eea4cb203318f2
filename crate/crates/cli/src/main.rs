//! `stylerecal` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "stylerecal", version, about = "Style-based recalibration experiments")]
pub struct Cli {
    /// Worker threads. Computation is currently single-threaded; the value
    /// is validated and recorded.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write metrics and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Accuracy under per-image pruning of the lowest gates of one stage.
    Prune(PruneArgs),
    /// Capture gates and compute correlation and top-activation statistics.
    Analyze(AnalyzeArgs),
    /// Parameter and operation counts of an architecture.
    Complexity(ComplexityArgs),
    /// Finite-difference gradient checks of every layer.
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic style-classification dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Augment {
    None,
    PadCropFlip,
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    /// Preset (resnet20, resnet32, resnet56, resnet50, cifar-bottleneck) or
    /// path to an architecture JSON file.
    #[arg(long, default_value = "resnet20")]
    pub arch: String,
    /// none, srm, se, se/r<N>, or <pools>/<cfc|mlp>[+bn][/r<N>]. Overrides
    /// the architecture file.
    #[arg(long)]
    pub recalib: Option<String>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset file, directory of dataset files (train.bin/test.bin) or
    /// directory of CIFAR-10 binary batches.
    #[arg(long, env = "STYLE_RECAL_DATA")]
    pub data: Option<PathBuf>,
    /// Use only the first N examples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Training configuration JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint (architecture and configuration are taken
    /// from it; only --steps/--epochs may change).
    #[arg(long, conflicts_with_all = ["config", "arch", "recalib"])]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, conflicts_with = "epochs")]
    pub steps: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Initial learning rate; later schedule points keep their ratios.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_enum)]
    pub augment: Option<Augment>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// Evaluate with normalization folded into the recalibration maps.
    #[arg(long)]
    pub folded: bool,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// 1-based stage index.
    #[arg(long)]
    pub stage: usize,
    /// Comma-separated ratios in [0, 1].
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Images retrieved per channel for the top-activation overlap.
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct ComplexityArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Input as C,H,W; defaults to 3,224,224 for ImageNet stems and 3,32,32
    /// otherwise.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub input: Option<Vec<usize>>,
    /// Count normalization running statistics as parameters.
    #[arg(long)]
    pub running_stats: bool,
    /// Print an aligned table instead of JSON.
    #[arg(long)]
    pub table: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 128)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
