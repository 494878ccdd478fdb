//! `occsplat`: one binary driving data generation, training, forecasting,
//! evaluation and gradient checks.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use occsplat::metrics::CollisionCounting;
use serde::Serialize;

use crate::error::CliResult;

#[derive(Parser, Debug)]
#[command(name = "occsplat", version, about = "Semantic occupancy rendering, tokenization and forecasting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (JSON); missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads inside a stage. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed applied to every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override, e.g. `--set vae.steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset of sequences.
    GenData(GenDataArgs),
    /// Fit anchored Gaussians to the rig views of one frame per sequence.
    TrainImg2occ(TrainImg2occArgs),
    /// Train the occupancy tokenizer.
    TrainVae(TrainVaeArgs),
    /// Fine-tune the tokenizer (stage 1) and train the world model (stage 2).
    TrainWorld(TrainWorldArgs),
    /// Forecast future grids and ego motion.
    Forecast(ForecastArgs),
    /// Score forecasts against ground truth.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub sequences: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainImg2occArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Only this sequence index.
    #[arg(long)]
    pub sequence: Option<usize>,
    /// Frame fitted in each sequence.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainVaeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Train one branch over all classes instead of the air-mask pair.
    #[arg(long)]
    pub no_air_mask: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainWorldArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Tokenizer checkpoint manifest.
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub stage1_steps: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct ForecastArgs {
    /// Tokenizer checkpoint manifest (the stage-1 one from train-world).
    #[arg(long)]
    pub vae: PathBuf,
    /// World-model checkpoint manifest.
    #[arg(long)]
    pub world: PathBuf,
    /// One sequence directory.
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    pub sequence: Option<PathBuf>,
    /// A dataset root; every sequence is forecast.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub history: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Forecast dataset (or single sequence) directory.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth dataset (or single sequence) directory.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub history: Option<usize>,
    /// Collision counting at each mark.
    #[arg(long, value_enum)]
    pub collision: Option<Collision>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Collision {
    PerMark,
    Cumulative,
}

impl From<Collision> for CollisionCounting {
    fn from(c: Collision) -> Self {
        match c {
            Collision::PerMark => CollisionCounting::PerMark,
            Collision::Cumulative => CollisionCounting::Cumulative,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GradModule {
    Splat,
    Vae,
    World,
    All,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = GradModule::All)]
    pub module: GradModule,
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.common.workers {
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    commands::dispatch(&cli.common, &cli.command)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
