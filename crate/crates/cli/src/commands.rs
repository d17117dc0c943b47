use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use ddp_core::checkpoint::Checkpoint;
use ddp_core::dataset::{self, Dataset};
use ddp_core::denoiser::DenoiserConfig;
use ddp_core::environment::{RewardKind, RewardTag, World};
use ddp_core::geometry::{Pose, Trajectory};
use ddp_core::planner::{self, ExecutionTrace};
use ddp_core::sampler::{self, GuidanceSpec, InpaintSpec, Model, SampleRequest, Strategy};
use ddp_core::trainer::{self, TrainOptions};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{RunConfig, DEFAULT_DENSE_RETURNS};
use crate::error::{CliError, Result};
use crate::metrics::{Aggregate, PathMetrics};
use crate::svg::Plot;
use crate::{EvalArgs, GenDataArgs, PlanArgs, Shared, SweepArgs, TrainArgs};

const HISTOGRAM_BINS: usize = 20;

/// Runs `f(0..count)` on up to `jobs` threads; results keep index order.
pub fn run_parallel<T: Send>(count: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, count.max(1));
    let mut out: Vec<(usize, T)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= count {
                            break mine;
                        }
                        mine.push((i, f(i)));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, t)| t).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::config(format!("{what} {} does not exist", path.display())))
    }
}

fn prepare(shared: &Shared) -> Result<RunConfig> {
    let cfg = RunConfig::load(shared.config.as_deref())?;
    std::fs::create_dir_all(&shared.out).map_err(|e| CliError::io(&shared.out, e))?;
    Ok(cfg)
}

fn jobs(shared: &Shared) -> usize {
    shared
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub num_paths: usize,
    pub waypoints_per_path: usize,
    pub dims: usize,
    pub reward_kind: RewardKind,
    pub return_min: f64,
    pub return_max: f64,
    /// Equal-width bins over `[return_min, return_max]`.
    pub return_histogram: Vec<usize>,
    /// Fraction of paths with at least one waypoint inside an obstacle.
    pub collision_fraction: f64,
}

impl DatasetSummary {
    pub fn of(data: &Dataset, world: &World) -> Result<Self> {
        let (lo, hi) = data.return_range();
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        let mut hist = vec![0; HISTOGRAM_BINS];
        for e in data.examples() {
            let b = if width > 0.0 {
                (((e.return_value - lo) / width) as usize).min(HISTOGRAM_BINS - 1)
            } else {
                0
            };
            hist[b] += 1;
        }
        let mut colliding = 0;
        for i in 0..data.len() {
            if world.collision_count(data.trajectory(i)?.poses()) > 0 {
                colliding += 1;
            }
        }
        Ok(Self {
            num_paths: data.len(),
            waypoints_per_path: data.horizon(),
            dims: data.dims(),
            reward_kind: data.header().reward_kind,
            return_min: lo,
            return_max: hi,
            return_histogram: hist,
            collision_fraction: colliding as f64 / data.len().max(1) as f64,
        })
    }
}

pub fn gen_data(shared: &Shared, args: &GenDataArgs) -> Result<Value> {
    let cfg = prepare(shared)?;
    let world = cfg.world(args.world.as_deref())?;
    let mut gen = cfg.gen_data.clone();
    if let Some(n) = args.count {
        gen.count = n;
    }
    if let Some(n) = args.waypoints {
        gen.waypoints_per_path = n;
    }
    if let Some(tag) = args.reward {
        gen.reward = RewardKind::from_tag(tag);
    }
    if let Some(mode) = args.mode {
        gen.mode = mode;
    }
    gen.seed = cfg.seed(shared.seed, gen.seed);
    let data = dataset::generate(&world, &gen)?;
    let path = shared.out.join("dataset.ddpt");
    data.save(&path)?;
    let summary = DatasetSummary::of(&data, &world)?;
    write_json(&shared.out.join("dataset_summary.json"), &summary)?;
    Ok(json!({
        "command": "gen-data",
        "dataset": path,
        "num_paths": summary.num_paths,
        "waypoints_per_path": summary.waypoints_per_path,
        "collision_fraction": summary.collision_fraction,
        "seed": gen.seed,
    }))
}

pub fn train(shared: &Shared, args: &TrainArgs) -> Result<Value> {
    let cfg = prepare(shared)?;
    let data_path = cfg.path(
        args.dataset.as_deref(),
        cfg.train.dataset.as_deref(),
        shared.out.join("dataset.ddpt"),
    );
    require(&data_path, "dataset")?;
    let data = Dataset::load(&data_path)?;

    let mut tc = cfg.train.trainer.clone();
    if let Some(v) = args.steps {
        tc.total_steps = v;
    }
    if let Some(v) = args.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = args.log_interval {
        tc.log_interval = v;
    }
    if let Some(v) = args.checkpoint_interval {
        tc.checkpoint_interval = v;
    }
    if let Some(v) = args.ema_decay {
        tc.ema_decay = Some(v);
    }
    tc.seed = cfg.seed(shared.seed, tc.seed);

    let dcfg = cfg.train.denoiser.clone().unwrap_or_else(|| DenoiserConfig {
        dims: data.dims(),
        horizon: data.horizon(),
        ..DenoiserConfig::default()
    });
    let ckpt_path = shared.out.join("model.ddpc");
    let resume = match &args.resume {
        None => None,
        Some(p) => {
            let p = p.clone().unwrap_or_else(|| ckpt_path.clone());
            require(&p, "checkpoint")?;
            Some(Checkpoint::load(&p)?)
        }
    };
    let resumed_from = resume.as_ref().map(|c| c.header().step);

    let mut progress = |step: usize, loss: f64| eprintln!("step {step} loss {loss:.6}");
    let opts = TrainOptions {
        resume,
        checkpoint_path: Some(ckpt_path.clone()),
        loss_log: Some(shared.out.join("loss.csv")),
        progress: Some(&mut progress),
    };
    let outcome = trainer::train_with(&data, &dcfg, &cfg.train.schedule, &tc, opts)?;
    outcome.checkpoint.save(&ckpt_path)?;
    Ok(json!({
        "command": "train",
        "checkpoint": ckpt_path,
        "step": outcome.checkpoint.header().step,
        "resumed_from": resumed_from,
        "parameters": outcome.checkpoint.header().param_count,
        "log_rows": outcome.losses.len(),
        "final_loss": outcome.losses.last().map(|l| l.1),
    }))
}

fn load_model(cfg: &RunConfig, flag: Option<&Path>, section: Option<&Path>, out: &Path) -> Result<Model> {
    let path = cfg.path(flag, section, out.join("model.ddpc"));
    require(&path, "checkpoint")?;
    Ok(Model::from_checkpoint(&Checkpoint::load(&path)?)?)
}

fn default_strategy(model: &Model) -> Strategy {
    match model.reward_kind.tag {
        RewardTag::Dense => Strategy::CfgDense,
        RewardTag::Sparse => Strategy::CfgSparse,
    }
}

/// Switching strategy also switches to its conventional target return.
fn retarget(g: &GuidanceSpec, strategy: Strategy, target: Option<f64>) -> GuidanceSpec {
    let mut out = g.clone();
    if out.strategy != strategy {
        out.strategy = strategy;
        out.target_return = GuidanceSpec::for_strategy(strategy).target_return;
    }
    if let Some(t) = target {
        out.target_return = t;
    }
    out
}

fn points(poses: &[Pose]) -> Vec<Vector3<f64>> {
    poses.iter().map(|p| p.position).collect()
}

fn mean_path(paths: &[Trajectory]) -> Vec<Vector3<f64>> {
    let n = paths.iter().map(|p| p.len()).min().unwrap_or(0);
    (0..n)
        .map(|t| paths.iter().map(|p| p.poses()[t].position).sum::<Vector3<f64>>() / paths.len() as f64)
        .collect()
}

/// One sweep cell as written to disk; also an `eval` input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub horizon: usize,
    pub target_return: f64,
    pub goal_repeats: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub start: Pose,
    pub goal: Pose,
    pub world: World,
    pub paths: Vec<Trajectory>,
}

#[derive(Debug, Clone, Serialize)]
struct CellRow {
    horizon: usize,
    target_return: f64,
    goal_repeats: usize,
    aggregate: Option<Aggregate>,
    error: Option<String>,
}

fn cell_name(h: usize, c: f64, i: usize) -> String {
    format!("h{h}_c{c}_i{i}")
}

pub fn sweep(shared: &Shared, args: &SweepArgs) -> Result<Value> {
    let cfg = prepare(shared)?;
    let sec = &cfg.sweep;
    let model = load_model(&cfg, args.checkpoint.as_deref(), sec.checkpoint.as_deref(), &shared.out)?;
    let world = cfg.world(args.world.as_deref())?;
    let strategy = args.strategy.or(sec.strategy).unwrap_or_else(|| default_strategy(&model));
    let base = retarget(
        &sec.guidance.clone().unwrap_or_else(|| GuidanceSpec::for_strategy(strategy)),
        strategy,
        None,
    );
    base.validate()?;
    model.check_strategy(&base)?;
    let horizons = args.horizons.clone().unwrap_or_else(|| sec.horizons.clone());
    let repeats = args.repeats.clone().unwrap_or_else(|| sec.repeats.clone());
    let returns = args.returns.clone().or_else(|| sec.returns.clone()).unwrap_or_else(|| {
        match strategy.reward_tag() {
            Some(RewardTag::Sparse) => vec![0.0],
            Some(RewardTag::Dense) => DEFAULT_DENSE_RETURNS.to_vec(),
            None => vec![base.target_return],
        }
    });
    let n_paths = args.paths.unwrap_or(sec.paths);
    let seed = cfg.seed(shared.seed, 0);
    if horizons.is_empty() || returns.is_empty() || repeats.is_empty() || n_paths == 0 {
        return Err(CliError::config("sweep grid is empty"));
    }
    let start = args.start.unwrap_or(sec.start);
    let goal = args.goal.unwrap_or(sec.goal);

    let mut cells = Vec::new();
    for &h in &horizons {
        for &c in &returns {
            for &i in &repeats {
                cells.push((h, c, i));
            }
        }
    }
    let dir = shared.out.join("sweep");
    let rows = run_parallel(cells.len(), jobs(shared), |n| -> Result<CellRow> {
        let (h, c, i) = cells[n];
        let guidance = GuidanceSpec {
            target_return: c,
            ..base.clone()
        };
        let inpaint = InpaintSpec {
            mode: sec.inpaint_mode,
            ..InpaintSpec::new(start, goal, i)
        };
        let req = SampleRequest {
            guidance: &guidance,
            inpaint: &inpaint,
            world: &world,
            horizon: h,
            batch: n_paths,
            seed,
        };
        let mut row = CellRow {
            horizon: h,
            target_return: c,
            goal_repeats: i,
            aggregate: None,
            error: None,
        };
        let batch = match sampler::sample_paths(&model, &req) {
            Ok(b) => b,
            Err(e) => {
                eprintln!("cell {}: {e}", cell_name(h, c, i));
                row.error = Some(e.to_string());
                return Ok(row);
            }
        };
        let tol = cfg.eval.tolerance;
        let metrics: Vec<PathMetrics> = batch
            .paths
            .iter()
            .map(|p| PathMetrics::of(&world, p.poses(), &goal, i, tol))
            .collect();
        let name = cell_name(h, c, i);
        let mut csv = String::from("path_index,collision_rate,goal_gap,path_length,success,min_clearance\n");
        for (k, (m, p)) in metrics.iter().zip(&batch.paths).enumerate() {
            csv.push_str(&format!(
                "{k},{},{},{},{},{}\n",
                m.collision_rate,
                m.goal_gap,
                m.path_length,
                m.success,
                world.min_clearance(p.poses())
            ));
        }
        write_text(&dir.join(format!("{name}.csv")), &csv)?;
        write_text(&dir.join(format!("{name}_paths.csv")), &batch.to_csv()?)?;
        let mut plot = Plot::new(&world, format!("{} N={h} c={c} i={i}", strategy.name()));
        for p in &batch.paths {
            plot.path(points(p.poses()), false);
        }
        plot.path(mean_path(&batch.paths), true)
            .marker(start.position, "green")
            .marker(goal.position, "red");
        write_text(&dir.join(format!("{name}.svg")), &plot.render())?;
        write_json(
            &dir.join(format!("{name}.json")),
            &SweepCell {
                horizon: h,
                target_return: c,
                goal_repeats: i,
                strategy,
                seed,
                start,
                goal,
                world: world.clone(),
                paths: batch.paths,
            },
        )?;
        row.aggregate = Some(Aggregate::of(&metrics));
        Ok(row)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;

    let mut csv = String::from(
        "horizon,target_return,goal_repeats,paths,collision_rate,collision_free_fraction,mean_goal_gap,mean_path_length,success_rate,error\n",
    );
    for r in &rows {
        match &r.aggregate {
            Some(a) => csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},\n",
                r.horizon,
                r.target_return,
                r.goal_repeats,
                a.paths,
                a.collision_rate,
                a.collision_free_fraction,
                a.mean_goal_gap,
                a.mean_path_length,
                a.success_rate
            )),
            None => csv.push_str(&format!(
                "{},{},{},0,,,,,,\"{}\"\n",
                r.horizon,
                r.target_return,
                r.goal_repeats,
                r.error.as_deref().unwrap_or_default().replace('"', "'")
            )),
        }
    }
    write_text(&shared.out.join("sweep.csv"), &csv)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    Ok(json!({
        "command": "sweep",
        "strategy": strategy.name(),
        "cells": rows.len(),
        "failed_cells": failed,
        "paths_per_cell": n_paths,
        "seed": seed,
        "aggregate": shared.out.join("sweep.csv"),
    }))
}

fn plan_plot(world: &World, trace: &ExecutionTrace, title: String) -> String {
    let mut plot = Plot::new(world, title);
    for r in &trace.replans {
        plot.path(points(r.selected_path.poses()), false);
    }
    plot.path(points(&trace.executed_path()), true)
        .marker(trace.start.position, "green")
        .marker(trace.goal.position, "red");
    plot.render()
}

pub fn plan(shared: &Shared, args: &PlanArgs) -> Result<Value> {
    let cfg = prepare(shared)?;
    let sec = &cfg.plan;
    let model = load_model(&cfg, args.checkpoint.as_deref(), sec.checkpoint.as_deref(), &shared.out)?;
    let world = cfg.world(args.world.as_deref())?;
    let mut pc = sec.planner.clone();
    if let Some(v) = args.horizon {
        pc.horizon = v;
    }
    if let Some(v) = args.tracked_steps {
        pc.tracked_steps = v;
    }
    if let Some(v) = args.batch {
        pc.batch = v;
    }
    if let Some(v) = args.goal_repeats {
        pc.goal_repeats = v;
    }
    if let Some(v) = args.max_replans {
        pc.max_replans = v;
    }
    if let Some(v) = args.warm_start {
        pc.warm_start = Some(v);
    }
    let strategy = args.strategy.or(sec.strategy).unwrap_or_else(|| {
        if sec.planner.guidance.strategy.reward_tag().is_some_and(|t| t != model.reward_kind.tag) {
            default_strategy(&model)
        } else {
            sec.planner.guidance.strategy
        }
    });
    pc.guidance = retarget(&pc.guidance, strategy, args.target_return);
    pc.validate()?;
    model.check_strategy(&pc.guidance)?;
    let start = args.start.unwrap_or(sec.start);
    let goal = args.goal.unwrap_or(sec.goal);
    let seeds = args.seeds.unwrap_or(sec.seeds).max(1);
    let base_seed = cfg.seed(shared.seed, 0);

    let traces = run_parallel(seeds, jobs(shared), |j| {
        planner::plan_and_execute(&model, &world, start, goal, &pc, base_seed + j as u64)
    });
    let traces = traces.into_iter().collect::<ddp_core::Result<Vec<_>>>()?;

    let mut trials = Vec::new();
    for (j, trace) in traces.iter().enumerate() {
        let dir = if seeds == 1 {
            shared.out.clone()
        } else {
            shared.out.join(format!("trial_{j:02}"))
        };
        let seed = base_seed + j as u64;
        write_text(&dir.join("trace.json"), &trace.to_json())?;
        write_text(&dir.join("executed.csv"), &trace.executed_csv())?;
        let title = format!("{} seed={seed} {:?}", strategy.name(), trace.termination);
        write_text(&dir.join("plan.svg"), &plan_plot(&world, trace, title))?;
        let m = PathMetrics::of(&world, &trace.executed_path(), &goal, 0, pc.goal_tolerance);
        trials.push(json!({
            "seed": seed,
            "termination": trace.termination,
            "replans": trace.replans.len(),
            "final_distance": trace.final_distance,
            "succeeded": trace.succeeded(),
            "collision_rate": m.collision_rate,
        }));
    }
    let successes = traces.iter().filter(|t| t.succeeded()).count();
    let summary = json!({
        "command": "plan",
        "strategy": strategy.name(),
        "seeds": seeds,
        "successes": successes,
        "success_rate": successes as f64 / seeds as f64,
        "trials": trials,
    });
    if seeds > 1 {
        write_json(&shared.out.join("plan_summary.json"), &summary)?;
    }
    Ok(summary)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EvalInput {
    Trace(Box<ExecutionTrace>),
    Cell(Box<SweepCell>),
}

#[derive(Debug, Serialize)]
struct InputMetrics {
    input: PathBuf,
    kind: &'static str,
    #[serde(flatten)]
    aggregate: Aggregate,
}

pub fn eval(shared: &Shared, args: &EvalArgs) -> Result<Value> {
    let cfg = prepare(shared)?;
    let inputs: Vec<PathBuf> = if args.inputs.is_empty() {
        cfg.eval.inputs.iter().map(|p| cfg.base.join(p)).collect()
    } else {
        args.inputs.clone()
    };
    if inputs.is_empty() {
        return Err(CliError::config("eval needs at least one trace or sweep-cell input"));
    }
    let tol = args.tolerance.unwrap_or(cfg.eval.tolerance);
    let mut per_input = Vec::new();
    let mut all = Vec::new();
    for path in &inputs {
        require(path, "input")?;
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed: EvalInput = serde_json::from_str(&text).map_err(|_| {
            CliError::config(format!("{} is neither an execution trace nor a sweep cell", path.display()))
        })?;
        let (kind, metrics) = match parsed {
            EvalInput::Trace(t) => {
                let world = cfg.world(args.world.as_deref())?;
                ("trace", vec![PathMetrics::of(&world, &t.executed_path(), &t.goal, 0, tol)])
            }
            EvalInput::Cell(c) => (
                "sweep-cell",
                c.paths
                    .iter()
                    .map(|p| PathMetrics::of(&c.world, p.poses(), &c.goal, c.goal_repeats, tol))
                    .collect(),
            ),
        };
        per_input.push(InputMetrics {
            input: path.clone(),
            kind,
            aggregate: Aggregate::of(&metrics),
        });
        all.extend(metrics);
    }
    let overall = Aggregate::of(&all);
    let path = shared.out.join("metrics.json");
    write_json(&path, &json!({ "tolerance": tol, "overall": overall, "inputs": per_input }))?;
    Ok(json!({
        "command": "eval",
        "metrics": path,
        "overall": overall,
    }))
}
