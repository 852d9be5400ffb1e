//! `crowd-cate`: generate datasets, train and evaluate estimators, run the
//! benchmark and serve what-if predictions.

mod commands;
mod config;
mod manifest;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crowd_cate::experiment::ExperimentError;
use crowd_cate::metrics::MetricsError;
use crowd_cate::model::{ModelError, ModelKind};
use crowd_cate::scenario::{OutcomeComponent, ScenarioError};
use crowd_cate::sim::SimError;

use config::ConfigError;

#[derive(Debug, Parser)]
#[command(name = "crowd-cate", version, about = "Counterfactual evacuation-guidance experiments")]
struct Cli {
    /// Worker threads for generation, training and benchmarking.
    #[arg(long, global = true, env = "CROWD_CATE_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate scenarios and write a dataset.
    Generate(GenerateArgs),
    /// Train one estimator on the training split of a dataset.
    Train(TrainArgs),
    /// Score checkpoints against the dataset's ground-truth tables.
    Evaluate(EvaluateArgs),
    /// Generate once, train every method over several seeds and check the verdicts.
    Bench(BenchArgs),
    /// Serve what-if predictions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Occupancy rate grid drawn per block.
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<f64>>,
    /// Keeps only the first N rate combinations.
    #[arg(long)]
    pub combos: Option<usize>,
    /// Scenarios per rate combination.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Omits the counterfactual tables.
    #[arg(long)]
    pub no_ground_truth: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: ModelKind,
    #[arg(long)]
    pub outcome: Option<OutcomeComponent>,
    /// Fixed balancing weight; the grid is searched when absent.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Split and initialization seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// Adds a row that predicts the ground-truth table itself.
    #[arg(long)]
    pub oracle: bool,
    /// Outcome of the oracle row.
    #[arg(long, default_value = "max")]
    pub outcome: OutcomeComponent,
    /// Split seed of the oracle row.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Line-delimited report output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Number of training seeds, 0..n.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long)]
    pub master_seed: Option<u64>,
    #[arg(long)]
    pub outcome: Option<OutcomeComponent>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<ModelKind>>,
    /// Text report output; reports go to `<out>.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, requires_all = ["mean", "std"], conflicts_with = "oracle")]
    pub max: Option<PathBuf>,
    #[arg(long, requires = "max")]
    pub mean: Option<PathBuf>,
    #[arg(long, requires = "max")]
    pub std: Option<PathBuf>,
    /// Answers with simulated outcomes instead of model predictions.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Replaces the port of `--addr`.
    #[arg(long)]
    pub port: Option<u16>,
    /// Seconds allowed for on-demand simulation per request.
    #[arg(long, default_value_t = 10.0)]
    pub sim_budget: f64,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0} acceptance verdict(s) failed")]
    Verdicts(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::Verdicts(_) => 1,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Config(_) | ScenarioError::Format { .. } | ScenarioError::LayoutMismatch { .. } => {
                CliError::Usage(e.to_string())
            }
            ScenarioError::Sim(s) => s.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::LayoutMismatch { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::LayoutMismatch(_) | MetricsError::MissingGroundTruth(_) => CliError::Usage(e.to_string()),
            MetricsError::Model(m) => m.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Scenario(e) => e.into(),
            ExperimentError::Model(e) => e.into(),
            ExperimentError::Metrics(e) => e.into(),
            ExperimentError::Config(m) => CliError::Usage(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    if let Command::Serve(args) = cli.command {
        return commands::serve(args);
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Generate(args) => commands::generate(args),
        Command::Train(args) => commands::train(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Bench(args) => commands::bench(args),
        Command::Serve(_) => unreachable!("handled above"),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
