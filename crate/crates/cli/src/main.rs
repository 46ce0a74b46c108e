//! `msfanet` command-line tool.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error.

mod cmd;
mod dataset;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msfanet::data::DensityProfile;
use msfanet::model::Ablation;

#[derive(Debug, Parser)]
#[command(name = "msfanet", version, about = "Crowd counting with multi-scale feature aggregation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment manifest (TOML).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Overrides the manifest seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data and evaluation work.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Resolve and print the configuration without doing any work.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render 1/8-scale ground-truth density maps for a dataset.
    Prepare(PrepareArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or run k-fold cross-validation.
    Eval(EvalArgs),
    /// Export density heatmaps and per-channel feature maps.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Dataset directory (defaults to the manifest data root).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value = "uniform")]
    pub profile: DensityProfile,
    #[arg(long, default_value_t = 224)]
    pub height: usize,
    #[arg(long, default_value_t = 224)]
    pub width: usize,
    #[arg(long, default_value_t = 10)]
    pub min_heads: usize,
    #[arg(long, default_value_t = 60)]
    pub max_heads: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Output directory (overrides the environment and the manifest).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "kfold")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory (defaults to the manifest data root).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Add far/mid/near band errors to the report.
    #[arg(long)]
    pub regions: bool,
    /// Write one density heatmap per image.
    #[arg(long)]
    pub heatmaps: bool,
    /// Cross-validate: train and evaluate on K folds (needs a manifest).
    #[arg(long)]
    pub kfold: Option<usize>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// Training iterations per fold.
    #[arg(long)]
    pub iterations: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Annotation sidecar of the image to visualize.
    #[arg(long)]
    pub sample: PathBuf,
    /// Feature hooks to export, e.g. `stem,block3`.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Validation(Vec<String>),
    Runtime(String),
}

impl From<msfanet::Error> for CliError {
    fn from(e: msfanet::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.global.workers {
        if n == 0 {
            eprintln!("error: --workers must be >= 1");
            return ExitCode::from(1);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.command {
        Command::Prepare(a) => cmd::prepare::run(&cli.global, a),
        Command::Synth(a) => cmd::synth::run(&cli.global, a),
        Command::Train(a) => cmd::train::run(&cli.global, a),
        Command::Eval(a) => cmd::eval::run(&cli.global, a),
        Command::Visualize(a) => cmd::visualize::run(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(problems)) => {
            eprintln!("validation failed:");
            for p in problems {
                eprintln!("  - {p}");
            }
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
