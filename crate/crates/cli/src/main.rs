//! `dfcn`: train, evaluate, inspect and check dilated segmentation networks.

mod commands;
mod error;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "dfcn", version, about)]
struct Cli {
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one fold; writes checkpoints, the run log and a report.
    Train(TrainArgs),
    /// Full cross-validation, optionally once per α.
    Cv(CvArgs),
    /// Label map and colour overlay for one image.
    Predict(PredictArgs),
    /// Hill-climbing fold assignment.
    Split(SplitArgs),
    /// Generate a synthetic texture-mosaic dataset.
    Synth(SynthArgs),
    /// Layer table, parameter count, receptive field and sampling coverage.
    Inspect(InspectArgs),
    /// Finite-difference check of every gradient, in f64.
    Gradcheck(GradcheckArgs),
    /// Build a dataset from PGM image, label and lung-mask triples.
    Import(ImportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split file from `dfcn split`; computed from the config seed if absent.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated α values, e.g. `0,0.01,0.1,1`.
    #[arg(long, value_delimiter = ',')]
    pub sweep_alpha: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A `TSR1` float tensor (`C×H×W`) or a PGM.
    #[arg(long)]
    pub image: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Consecutive rejected swaps before stopping.
    #[arg(long, default_value_t = 10_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Canvas side length.
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.3)]
    pub unlabeled_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print every built-in ablation configuration with its parameter count.
    #[arg(long)]
    pub table2: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run config whose network is checked; a small network by default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// CSV lines `case_id,image.pgm,labels.pgm,mask.pgm`, paths relative
    /// to the list file.
    #[arg(long)]
    pub list: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep crops that carry no annotation.
    #[arg(long)]
    pub keep_unannotated: bool,
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Cv(a) => commands::cv(a),
        Command::Predict(a) => commands::predict(a),
        Command::Split(a) => commands::split(a),
        Command::Synth(a) => commands::synth(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Import(a) => commands::import(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
