mod commands;
mod config;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latentplan::model::ModelVariant;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Io(String),
    /// A verified bound was exceeded.
    Bound(String),
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Io(_) => 3,
            Failure::Bound(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "invalid input: {m}"),
            Failure::Io(m) => write!(f, "I/O error: {m}"),
            Failure::Bound(m) => write!(f, "bound violated: {m}"),
            Failure::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<latentplan::Error> for Failure {
    fn from(e: latentplan::Error) -> Self {
        use latentplan::Error as E;
        match e {
            E::InvalidConfig(_) | E::DimensionMismatch { .. } | E::NoValidSegment { .. } | E::EnumerationCap { .. } => {
                Failure::Validation(e.to_string())
            }
            E::Io(_) | E::Corrupt { .. } | E::Json(_) => Failure::Io(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "latentplan", version, about = "Latent reward-prediction models and MPC on multi-pendulum swing-up")]
pub struct Cli {
    /// TOML experiment config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of pendulums (overrides env.n_pendulums).
    #[arg(long, global = true)]
    pub pendulums: Option<usize>,
    /// Fill the seconds column of training logs. Off by default so reruns are byte-identical.
    #[arg(long, global = true)]
    pub wall_clock: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record OU-noise transitions into a dataset file.
    Collect {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train a model on a recorded dataset.
    TrainOffline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Alternate epsilon-greedy MPC episodes with training.
    TrainOnline {
        #[arg(long)]
        iterations: Option<usize>,
        /// Run several seeds one after another, each into `<out>/seed-<seed>`.
        #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
        seeds: Vec<u64>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate MPC with a trained checkpoint or with the true dynamics.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Plan with the ground-truth environment model instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Check the value-gap and suboptimality bounds on enumerable tabular instances.
    VerifyTheorem {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        /// Largest horizon for random instances; the exact horizon for the others.
        #[arg(long, default_value_t = 4)]
        horizon: usize,
        #[arg(long, value_enum, default_value_t = InstanceKind::Random)]
        kind: InstanceKind,
        /// Reward offset of the `offset` instances.
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        #[arg(long, default_value_t = 6)]
        max_states: usize,
        #[arg(long, default_value_t = 3)]
        max_actions: usize,
    },
    /// Aggregate finished runs into tables and curve data.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub variant: Option<ModelVariant>,
    #[arg(long)]
    pub d_z: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InstanceKind {
    /// Random MDPs with a perturbed latent model.
    Random,
    /// Random MDPs with their exact latent model.
    Identity,
    /// Exact latent model with every reward lowered by `delta`, gamma 1.
    Offset,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
