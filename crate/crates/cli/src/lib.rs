//! Command-line harness: dataset generation, training, attack campaigns,
//! transfer evaluation and gradient checks.

pub mod commands;
pub mod config;
pub mod error;
pub mod results;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use results::{ResultRow, ResultsFile};

#[derive(Debug, Parser)]
#[command(name = "seglab", version, about = "Segmentation attack lab")]
pub struct Cli {
    /// Worker threads for per-image work (0 = all cores).
    #[arg(long, env = "SEGLAB_JOBS", global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train a model (standard or adversarial, per the config's train section).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run the configured attacks at every iteration budget.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        /// Also render SVG plots under `plots/`.
        #[arg(long)]
        emit_svg: bool,
    },
    /// Craft adversarial examples on one model and evaluate them on another.
    Transfer {
        #[arg(long)]
        source_checkpoint: PathBuf,
        #[arg(long)]
        target_checkpoint: PathBuf,
        /// Attack as `kind[:iterations]`, e.g. `segpgd:20`.
        #[arg(long)]
        attack: String,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        /// Optional experiment config supplying epsilon, alpha, schedule,
        /// seed and evaluation split from its first matching attack section.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Comma-separated ops to check (default: all).
        #[arg(long, value_delimiter = ',')]
        scope: Vec<String>,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the backward pass of this op (harness self-test).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Rebuild the results CSV from the per-image records in a results.json.
    Summarize {
        #[arg(long)]
        results: PathBuf,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs a parsed command inside a thread pool sized by `--jobs`.
pub fn run(cli: Cli) -> CliResult<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs.filter(|&j| j > 0) {
        pool = pool.num_threads(j);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;
    pool.install(|| commands::dispatch(cli.command))
}
