//! Command-line entry point: corpus generation, the training loop,
//! prediction, evaluation, orchestration, and report rendering.
//!
//! Every command is deterministic given its flags and seed. Exit codes:
//! 0 success, 1 runtime failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// A command failure with its exit class.
#[derive(Debug)]
pub enum Failure {
    /// The invocation itself is wrong (exit 2).
    Usage(String),
    /// The invocation is fine but the work failed (exit 1).
    Runtime(anyhow::Error),
}

macro_rules! runtime_from {
    ($($ty:ty),* $(,)?) => {$(
        impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Failure::Runtime(e.into())
            }
        }
    )*};
}

runtime_from!(
    anyhow::Error,
    std::io::Error,
    serde_json::Error,
    jotforge_core::corpus::CorpusError,
    jotforge_core::evaluation::EvalError,
    jotforge_core::knowledge::KnowledgeError,
    jotforge_core::lifecycle::LifecycleError,
    jotforge_core::materializer::MaterializeError,
    jotforge_core::modeling::ModelError,
);

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Parser)]
#[command(name = "jotforge", version, about = "Budgeted feature pipelines for job runtime prediction and cost-aware cluster selection")]
struct Cli {
    /// Pipeline config file (JSON); flags override its values, and
    /// JOTFORGE_SEED overrides its seed.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic workload corpus.
    GenCorpus(GenCorpusArgs),
    /// Run the iterative training loop and package a model bundle.
    Train(TrainArgs),
    /// Predict one job's duration from a packaged bundle.
    Predict(PredictArgs),
    /// Replay a bundle over every run in a corpus and score it.
    Evaluate(EvaluateArgs),
    /// Choose the cheapest cluster config that meets an SLO.
    Orchestrate(OrchestrateArgs),
    /// Render a training output directory.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct GenCorpusArgs {
    /// Output directory for the corpus files.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tables: Option<usize>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Runs per job.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Disable measurement noise and workload drift.
    #[arg(long)]
    pub noiseless: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus directory (falls back to the config's corpus_dir).
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    /// Output directory for the iteration log and bundle (falls back to
    /// the config's out_dir).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub budget_ms: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub cv_folds: Option<usize>,
    /// Data snapshot id stamped into the bundle manifest.
    #[arg(long, value_name = "ID")]
    pub snapshot: Option<String>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("target").required(true).multiple(false)))]
pub struct PredictArgs {
    /// Bundle directory written by `train`.
    #[arg(long, value_name = "DIR")]
    pub bundle: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    /// Predict the artifact of this recorded run (replay).
    #[arg(long, value_name = "RUN_ID", group = "target")]
    pub run: Option<String>,
    /// Predict this job as newly scheduled after all recorded history.
    #[arg(long, value_name = "JOB_ID", group = "target")]
    pub job: Option<String>,
    /// Override the cluster config with this fleet instance.
    #[arg(long, value_name = "NAME")]
    pub instance: Option<String>,
    /// Scheduling time for --job (seconds since epoch); defaults to
    /// after all recorded history.
    #[arg(long, value_name = "UNIX_SECONDS")]
    pub at: Option<i64>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "DIR")]
    pub bundle: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).multiple(false)))]
pub struct OrchestrateArgs {
    #[arg(long, value_name = "DIR")]
    pub bundle: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    /// Decide for this one job.
    #[arg(long, value_name = "JOB_ID", group = "mode")]
    pub job: Option<String>,
    /// Decide for every job and compare cost against the largest fixed
    /// config.
    #[arg(long, group = "mode")]
    pub simulate: bool,
    /// Latency bound the prediction must meet; unbounded when omitted.
    #[arg(long, value_name = "SECONDS")]
    pub slo: Option<f64>,
    /// Candidate fleet as a JSON array of cluster configs; defaults to
    /// the corpus fleet.
    #[arg(long, value_name = "FILE")]
    pub fleet: Option<PathBuf>,
    /// Append each decision to this JSONL file.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Training output directory (holds iterations.json).
    #[arg(long, value_name = "DIR")]
    pub dir: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let config = config::load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus(args) => commands::gen_corpus(config, &args),
        Command::Train(args) => commands::train(config, &args),
        Command::Predict(args) => commands::predict(config, &args),
        Command::Evaluate(args) => commands::evaluate(config, &args),
        Command::Orchestrate(args) => commands::orchestrate(config, &args),
        Command::Report(args) => commands::report(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
