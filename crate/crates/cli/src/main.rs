//! `epsmcmc` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime
//! failure (including interruption).

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "epsmcmc",
    version,
    about = "Embarrassingly parallel sequential MCMC for gamma-beta volatility panels"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a panel and write it as CSV with a metadata sidecar.
    Simulate(SimulateArgs),
    /// Run the block-parallel sequential sampler on a panel.
    Run(RunArgs),
    /// Run the full-panel Gibbs sampler on a panel.
    Mcmc(McmcArgs),
    /// Run the block-parallel particle filter on a panel.
    Rapf(RapfArgs),
    /// Merge per-block draw files into one posterior sample.
    Merge(MergeArgs),
    /// Run a repeated simulation experiment and write MSE tables.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of series.
    #[arg(long)]
    pub m: usize,
    /// Observations per series.
    #[arg(long = "T")]
    pub t: usize,
    #[arg(long, default_value_t = 0.7)]
    pub lambda: f64,
    #[arg(long, default_value_t = 3.8)]
    pub kappa: f64,
    #[arg(long, default_value_t = 10.0)]
    pub nu: f64,
    /// Latent state before burn-in.
    #[arg(long, default_value_t = 10.0)]
    pub x0: f64,
    /// Discarded initial steps.
    #[arg(long, default_value_t = 2000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Panel CSV to write; the sidecar goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the latent paths (with the initial state as row 0).
    #[arg(long)]
    pub latent: Option<PathBuf>,
}

/// Bandwidth and index-chain settings shared by every merging command.
#[derive(Debug, Clone, Args)]
pub struct MergeOpts {
    /// `silverman`, `scott` or a fixed value in standardized units.
    #[arg(long)]
    pub bandwidth: Option<String>,
    /// Retained merge draws.
    #[arg(long)]
    pub merge_iters: Option<usize>,
    /// Discarded index-chain sweeps.
    #[arg(long)]
    pub merge_burnin: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Panel CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file with defaults for the options below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Series per block.
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Time steps between updates.
    #[arg(long = "J")]
    pub j: Option<usize>,
    /// Replica chains per block.
    #[arg(long = "L")]
    pub replicas: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub burnin_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "EPSMCMC_WORKERS")]
    pub workers: Option<usize>,
    /// Known initial state for every series; the default is a diffuse start.
    #[arg(long)]
    pub x0: Option<f64>,
    /// Merge after every update instead of only after the last.
    #[arg(long)]
    pub merge_every_update: bool,
    #[command(flatten)]
    pub merge: MergeOpts,
    /// Directory for resumable snapshots.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct McmcArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub x0: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RapfArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "K", default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 1000)]
    pub particles: usize,
    #[arg(long, default_value_t = 0.98)]
    pub shrinkage: f64,
    /// Resampling threshold; defaults to half the particle count.
    #[arg(long)]
    pub ess_threshold: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "EPSMCMC_WORKERS", default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub x0: Option<f64>,
    #[command(flatten)]
    pub merge: MergeOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// One draw CSV per block (needs lambda, kappa and nu columns).
    #[arg(long, num_args = 1.., required = true)]
    pub draws: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub merge: MergeOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML experiment spec; flags override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Grid axes such as `J=50,100,200` and `K=10..50`.
    #[arg(long, num_args = 1..)]
    pub grid: Vec<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated: ep_smcmc, mcmc, ep_rapf.
    #[arg(long, value_delimiter = ',')]
    pub algorithms: Vec<String>,
    #[arg(long = "L")]
    pub replicas: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "EPSMCMC_WORKERS")]
    pub workers: Option<usize>,
    /// Also time one run at each of these worker counts, e.g. `1,2,4`.
    #[arg(long, value_delimiter = ',')]
    pub timing: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Run(a) => commands::run(a),
        Command::Mcmc(a) => commands::mcmc(a),
        Command::Rapf(a) => commands::rapf(a),
        Command::Merge(a) => commands::merge(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    fn message(&self) -> String {
        let (Failure::Config(m) | Failure::Data(m) | Failure::Runtime(m)) = self;
        // Single-line reasons only.
        m.replace('\n', " ")
    }
}
