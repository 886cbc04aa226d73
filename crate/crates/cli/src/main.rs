use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "sthawkes", version, about = "Spatiotemporal Hawkes simulation, thinning, estimation and hotspot evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of streams to simulate; overrides `[simulate] streams`.
    #[arg(long)]
    pub streams: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Input stream CSV, or a directory of runs for `report`.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate complete event streams.
    Simulate(Common),
    /// Thin streams with the configured reporting rates.
    Thin(Common),
    /// Fit by expectation-maximisation.
    FitEm(Common),
    /// Fit by multi-start WGAN training and goodness-of-fit selection.
    FitWgan(Common),
    /// Score candidate parameters against training data.
    Gof {
        #[command(flatten)]
        common: Common,
        /// JSON array of candidate parameter sets.
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Expected-count grids, relative MAE, hotspot accuracy and heatmaps.
    Hotspots(Common),
    /// Robustness table over a parameter grid.
    Sweep(Common),
    /// Collate the manifests of finished runs.
    Report(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Simulate(c) => ("simulate", c),
        Command::Thin(c) => ("thin", c),
        Command::FitEm(c) => ("fit-em", c),
        Command::FitWgan(c) => ("fit-wgan", c),
        Command::Gof { common, .. } => ("gof", common),
        Command::Hotspots(c) => ("hotspots", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Report(c) => ("report", c),
    };
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().ok();
    }
    let candidates = match &cli.command {
        Command::Gof { candidates, .. } => candidates.clone(),
        _ => None,
    };
    match commands::run(name, common, candidates) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
