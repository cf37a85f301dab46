//! `dnas`: search, benchmark, count and retrain from the command line.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "dnas", version, about = "Inference-aware differentiable architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one search, or an α × λ grid sharing one warmup.
    Search(SearchArgs),
    /// Build a latency lookup table.
    Bench(BenchArgs),
    /// Count the architectures in a search space.
    Count(CountArgs),
    /// Train a sampled architecture from scratch and report top-1.
    Retrain(RetrainArgs),
}

#[derive(Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prebuilt latency table; overrides `[latency]` in the config.
    #[arg(long)]
    pub lut: Option<PathBuf>,
    /// Comma-separated α values; enables grid mode.
    #[arg(long, value_delimiter = ',')]
    pub grid_alpha: Vec<f64>,
    /// Comma-separated λ values for grid mode.
    #[arg(long, value_delimiter = ',')]
    pub grid_lambda: Vec<f64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BenchMode {
    Analytic,
    Measured,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum, default_value = "analytic")]
    pub mode: BenchMode,
    /// μs per multiply-accumulate (analytic mode).
    #[arg(long)]
    pub unit_cost: Option<f64>,
    /// Fixed μs per block (analytic mode).
    #[arg(long)]
    pub overhead: Option<f64>,
    /// Timed runs per block (measured mode).
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct CountArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub per_layer: bool,
}

#[derive(Args)]
pub struct RetrainArgs {
    #[arg(long)]
    pub arch: PathBuf,
    /// Defaults to the config recorded in the manifest next to `--arch`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Output directory; defaults to the directory of `--arch`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Search(a) => commands::search(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Count(a) => commands::count(&a),
        Command::Retrain(a) => commands::retrain(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
