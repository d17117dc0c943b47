//! `ddp` command line: data generation, training, sampling sweeps,
//! closed-loop planning and evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error or
//! missing input, 3 I/O error or corrupt file, 4 non-finite training loss,
//! 5 start or goal inside an obstacle.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ddp_core::environment::RewardTag;
use ddp_core::geometry::{Pose, PoseMode};
use ddp_core::sampler::Strategy;
use serde::de::DeserializeOwned;
use serde_json::Value;

pub use error::{exit, CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "ddp", version, about = "Diffusion path planner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a straight-line training dataset.
    GenData(GenDataArgs),
    /// Train the denoiser on a dataset.
    Train(TrainArgs),
    /// Sample open-loop paths over a horizon, return and repeat grid.
    Sweep(SweepArgs),
    /// Run closed-loop planning with replanning.
    Plan(PlanArgs),
    /// Compute metrics over plan traces or sweep cells.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// JSON run file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub waypoints: Option<usize>,
    /// `dense` or `sparse`.
    #[arg(long, value_parser = serde_name::<RewardTag>)]
    pub reward: Option<RewardTag>,
    /// `position-only` or `full-pose`.
    #[arg(long, value_parser = serde_name::<PoseMode>)]
    pub mode: Option<PoseMode>,
    /// Fixture name or world JSON path.
    #[arg(long)]
    pub world: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub log_interval: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    /// Continue from a checkpoint (default: `<out>/model.ddpc`).
    #[arg(long, num_args = 0..=1)]
    pub resume: Option<Option<PathBuf>>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub world: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub returns: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub repeats: Option<Vec<usize>>,
    /// Paths sampled per cell.
    #[arg(long)]
    pub paths: Option<usize>,
    /// `x,y,z`
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub start: Option<Pose>,
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub goal: Option<Pose>,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// One of cfg-dense, cfg-sparse, cost-only, cfg-dense+cost, cfg-sparse+cost.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long, allow_hyphen_values = true)]
    pub target_return: Option<f64>,
    #[arg(long)]
    pub world: Option<String>,
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub start: Option<Pose>,
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub goal: Option<Pose>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub tracked_steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub goal_repeats: Option<usize>,
    #[arg(long)]
    pub max_replans: Option<usize>,
    /// Re-noise the previous plan to this diffusion step instead of starting from noise.
    #[arg(long)]
    pub warm_start: Option<usize>,
    /// Independent trials with consecutive seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Trace or sweep-cell JSON files.
    pub inputs: Vec<PathBuf>,
    /// World for traces, which do not record one.
    #[arg(long)]
    pub world: Option<String>,
    /// Goal distance that counts as success (m).
    #[arg(long)]
    pub tolerance: Option<f64>,
}

fn serde_name<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_pose(s: &str) -> std::result::Result<Pose, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, z] => Ok(Pose::from_xyz(x, y, z)),
        _ => Err(format!("expected x,y,z, got {s:?}")),
    }
}

pub fn run(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&a.shared, a),
        Command::Train(a) => commands::train(&a.shared, a),
        Command::Sweep(a) => commands::sweep(&a.shared, a),
        Command::Plan(a) => commands::plan(&a.shared, a),
        Command::Eval(a) => commands::eval(&a.shared, a),
    }
}
