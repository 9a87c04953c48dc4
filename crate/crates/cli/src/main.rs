//! Command-line front end for the probe -> score -> route -> analyze
//! pipeline. Every run is deterministic given the config seed; the only
//! environment knob is GRADSIFT_WORKERS (probe fan-out width).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use gradsift_core::io::IoError;
use gradsift_core::metrics::Metric;

/// Exit codes: 0 success, 2 usage (from clap), 3 validation, 4 I/O.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::File { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

macro_rules! validation_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    )*};
}
validation_from!(
    gradsift_core::probe::ProbeError,
    gradsift_core::metrics::MetricsError,
    gradsift_core::router::RouterError,
    gradsift_core::analysis::AnalysisError
);

#[derive(Parser)]
#[command(
    name = "gradsift",
    version,
    about = "Probe gradient concentration and route trajectories into SFT/RL partitions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run single-backward-pass probes over a trajectory corpus.
    Probe(ProbeArgs),
    /// Score a gradient dump with a concentration metric.
    Score(ScoreArgs),
    /// Split a score file into SFT and RL partitions.
    Route(RouteArgs),
    /// Agreement and robustness reports over existing artifacts.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Args)]
struct ProbeArgs {
    /// Pipeline config (model shape, context length, seed, default paths).
    #[arg(long)]
    config: PathBuf,
    /// Trajectory corpus; defaults to [paths].corpus from the config.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output gradient dump; defaults to [paths].dump from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config rng_seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Gradient dump to score; defaults to [paths].dump from the config.
    dump: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// gini | kurtosis | cv | l2
    #[arg(long, value_parser = Metric::from_str)]
    metric: Option<Metric>,
    /// Divide each norm by sqrt(group parameter count) before scoring.
    #[arg(long)]
    normalized: bool,
    /// Output score file; defaults to [paths].scores from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RouteArgs {
    /// Score file to split; defaults to [paths].scores from the config.
    scores: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// median | quantile
    #[arg(long)]
    rule: Option<String>,
    /// RL share in (0,1); required with --rule quantile.
    #[arg(long)]
    rl_fraction: Option<f64>,
    /// Swap the SFT and RL assignments (ablation).
    #[arg(long)]
    inverse: bool,
    /// Output manifest; defaults to [paths].manifest from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// RL-set overlap across two or more partition manifests of one corpus.
    Consensus {
        #[arg(num_args = 2.., required = true)]
        manifests: Vec<PathBuf>,
        /// Monte-Carlo trials for the random-split baseline (0 to skip).
        #[arg(long, default_value_t = 200)]
        baseline_trials: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank correlation between two score files over the same corpus.
    Spearman {
        left: PathBuf,
        right: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantile-split the same scores at several RL fractions.
    Sweep {
        scores: PathBuf,
        /// Comma-separated fractions in (0,1), e.g. 0.1,0.25,0.5
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank agreement between raw and parameter-normalized scores.
    NormRobustness {
        dump: PathBuf,
        #[arg(long, value_parser = Metric::from_str, default_value = "gini")]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
