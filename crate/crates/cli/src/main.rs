//! `mrekf`: simulate digester scenarios, run filters on them, sweep tunings
//! and compare runs.

mod commands;
mod compare;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Divergence(String),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Validation(m) => write!(f, "invalid input: {m}"),
            Self::Divergence(m) => write!(f, "run failed: {m}"),
            Self::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 2,
            Self::Divergence(_) => 3,
            Self::Io(_) => 4,
        }
    }
}

impl From<mrekf::io::IoError> for CliError {
    fn from(e: mrekf::io::IoError) -> Self {
        match e {
            mrekf::io::IoError::Schema(m) => Self::Validation(m),
            mrekf::io::IoError::Csv(e) if !e.is_io_error() => Self::Validation(e.to_string()),
            other => Self::Io(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mrekf", version, about = "Multi-rate extended Kalman filtering for delayed laboratory measurements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic plant run: feeding, ground truth and measurements.
    Simulate(SimulateArgs),
    /// Run a filter over an event file.
    Estimate(EstimateArgs),
    /// Latin-hypercube sweep over filter tunings.
    Tune(TuneArgs),
    /// Compare estimation runs against their ground truth.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct ScenarioOverrides {
    /// Horizon in days.
    #[arg(long)]
    pub days: Option<f64>,
    /// Start from row 1-4 of the standard scenario table (delays, mismatch, initial error).
    #[arg(long)]
    pub scenario_row: Option<usize>,
    /// Acetic acid laboratory delay in hours.
    #[arg(long)]
    pub delay_ac: Option<f64>,
    /// Inorganic nitrogen laboratory delay in hours.
    #[arg(long)]
    pub delay_in: Option<f64>,
    /// Measurement noise multiplier.
    #[arg(long)]
    pub k_sigma: Option<f64>,
    /// Relative parameter mismatch of the filter model.
    #[arg(long)]
    pub pmm: Option<f64>,
    /// Initial-state error multiplier.
    #[arg(long)]
    pub init_error: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ScenarioOverrides,
    #[arg(long, env = "MRKF_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodArg {
    Mrekf,
    Recalc,
    Ekf,
    Alexander,
    Larsen,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// Event CSV (t_days, kind, id, signal_mask, v1..vN).
    #[arg(long)]
    pub events: PathBuf,
    /// Scenario configuration; defaults to config.json next to the event file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Linear system JSON; runs the filter on that system instead of the digester.
    #[arg(long)]
    pub linear_system: Option<PathBuf>,
    /// Tuning as a JSON file or inline JSON object.
    #[arg(long)]
    pub tuning: Option<String>,
    #[arg(long, value_enum, default_value = "mrekf")]
    pub method: MethodArg,
    /// Abort the run after this many seconds.
    #[arg(long)]
    pub cutoff_secs: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    /// Scenario configuration; built-in zero-delay defaults when absent.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ScenarioOverrides,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 30.0)]
    pub cutoff_secs: f64,
    /// Seed of the Latin hypercube.
    #[arg(long, env = "MRKF_SEED")]
    pub seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Output directories of `estimate` runs.
    #[arg(long, num_args = 2.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Ground truth CSV; defaults to truth.csv inside each run directory.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Estimate(a) => commands::estimate(&a),
        Command::Tune(a) => commands::tune(&a),
        Command::Compare(a) => compare::compare(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mrekf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
