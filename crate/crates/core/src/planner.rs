//! Closed-loop receding-horizon planning against a simulated end effector.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::environment::World;
use crate::geometry::{orientation_gap, Pose, PoseMode, Trajectory};
use crate::matrix::Matrix;
use crate::sampler::{
    sample_paths_from, ChainStart, GuidanceSpec, InpaintMode, InpaintSpec, Model, PathDiagnostics, SampleRequest,
    DEFAULT_BATCH, DEFAULT_GOAL_REPEATS, DEFAULT_HORIZON,
};

pub const DEFAULT_TRACKED_STEPS: usize = 64;
pub const DEFAULT_GOAL_TOLERANCE: f64 = 0.05;
pub const DEFAULT_ORIENTATION_TOLERANCE: f64 = 0.2;
pub const DEFAULT_MAX_REPLANS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub horizon: usize,
    pub tracked_steps: usize,
    pub batch: usize,
    /// Position tolerance (m).
    pub goal_tolerance: f64,
    /// Orientation tolerance (rad), used only in full-pose mode.
    pub orientation_tolerance: f64,
    pub max_replans: usize,
    pub guidance: GuidanceSpec,
    pub goal_repeats: usize,
    /// Standard deviation (m) of Gaussian noise on each reached position.
    pub tracker_noise: f64,
    pub inpaint_mode: InpaintMode,
    /// Start each replan's reverse chain at this step from the re-noised
    /// remainder of the previous plan instead of from pure noise.
    pub warm_start: Option<usize>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            tracked_steps: DEFAULT_TRACKED_STEPS,
            batch: DEFAULT_BATCH,
            goal_tolerance: DEFAULT_GOAL_TOLERANCE,
            orientation_tolerance: DEFAULT_ORIENTATION_TOLERANCE,
            max_replans: DEFAULT_MAX_REPLANS,
            guidance: GuidanceSpec::default(),
            goal_repeats: DEFAULT_GOAL_REPEATS,
            tracker_noise: 0.0,
            inpaint_mode: InpaintMode::Clean,
            warm_start: None,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tracked_steps == 0 || self.tracked_steps + self.goal_repeats > self.horizon {
            return Err(Error::config(format!(
                "tracked steps must lie in 1..={} for horizon {} with {} goal repeats",
                self.horizon.saturating_sub(self.goal_repeats),
                self.horizon,
                self.goal_repeats
            )));
        }
        if !(self.goal_tolerance > 0.0) {
            return Err(Error::config("goal tolerance must be positive"));
        }
        if !(self.orientation_tolerance > 0.0) {
            return Err(Error::config("orientation tolerance must be positive"));
        }
        if !(self.tracker_noise >= 0.0 && self.tracker_noise.is_finite()) {
            return Err(Error::config("tracker noise must be a finite non-negative value"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must contain at least one path"));
        }
        self.guidance.validate()
    }

    fn reached(&self, mode: PoseMode, current: &Pose, goal: &Pose) -> bool {
        let close = (current.position - goal.position).norm() <= self.goal_tolerance;
        match mode {
            PoseMode::PositionOnly => close,
            PoseMode::FullPose => {
                close && orientation_gap(&current.orientation, &goal.orientation) <= self.orientation_tolerance
            }
        }
    }
}

/// Follows the first `m` waypoints of `path` and returns the reached pose
/// (waypoint `m - 1`, position perturbed by `sigma`) and the executed prefix.
pub fn track(path: &Trajectory, m: usize, sigma: f64, rng: &mut impl Rng) -> Result<(Pose, Vec<Pose>)> {
    if m == 0 || m > path.len() {
        return Err(Error::config(format!(
            "cannot track {m} waypoints of a {}-waypoint path",
            path.len()
        )));
    }
    let executed = path.poses()[..m].to_vec();
    let mut reached = executed[m - 1];
    if sigma > 0.0 {
        let noise = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * sigma);
        reached.position += noise;
    }
    Ok((reached, executed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GoalReached,
    MaxReplans,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanRecord {
    pub index: usize,
    pub start: Pose,
    pub diagnostics: Vec<PathDiagnostics>,
    pub selected: usize,
    pub selected_path: Trajectory,
    pub executed: Vec<Pose>,
    pub reached: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub start: Pose,
    pub goal: Pose,
    pub replans: Vec<ReplanRecord>,
    pub termination: Termination,
    /// Diagnostic when `termination` is `error`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub final_pose: Pose,
    pub final_distance: f64,
}

impl ExecutionTrace {
    pub fn succeeded(&self) -> bool {
        self.termination == Termination::GoalReached
    }

    /// Every executed waypoint in order, starting at the initial pose.
    pub fn executed_path(&self) -> Vec<Pose> {
        let mut out = vec![self.start];
        for r in &self.replans {
            out.extend_from_slice(&r.executed);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    /// `waypoint_index,x,y,z` for the executed path.
    pub fn executed_csv(&self) -> String {
        use std::fmt::Write;
        let mut out = String::from("waypoint_index,x,y,z\n");
        for (i, p) in self.executed_path().iter().enumerate() {
            writeln!(out, "{i},{},{},{}", p.position.x, p.position.y, p.position.z).expect("string write");
        }
        out
    }
}

fn check_pose(world: &World, pose: &Pose, which: &'static str) -> Result<()> {
    if !pose.position.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("{which} pose")));
    }
    if !world.in_bounds(&pose.position) {
        return Err(Error::OutOfBounds { which });
    }
    if world.in_collision(&pose.position) {
        return Err(Error::InCollision { which });
    }
    Ok(())
}

/// Re-noised remainder of the previous plan, shifted to start at the
/// reached waypoint and padded with the goal.
fn warm_iterates(
    model: &Model,
    previous: &Trajectory,
    m: usize,
    k: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Matrix>> {
    let flat = model.normalization.normalize(&previous.flatten(previous.mode())?)?;
    let n = flat.rows();
    let shifted = Matrix::from_fn(n, flat.cols(), |r, c| flat.get((r + m - 1).min(n - 1), c));
    (0..batch)
        .map(|_| {
            let noise = Matrix::from_fn(n, flat.cols(), |_, _| rng.sample(StandardNormal));
            model.schedule.forward_sample(&shifted, k, &noise)
        })
        .collect()
}

/// Samples, selects and tracks until the goal is within tolerance or the
/// replan budget runs out.
pub fn plan_and_execute(
    model: &Model,
    world: &World,
    start: Pose,
    goal: Pose,
    cfg: &PlanConfig,
    seed: u64,
) -> Result<ExecutionTrace> {
    cfg.validate()?;
    check_pose(world, &start, "start")?;
    check_pose(world, &goal, "goal")?;
    if let Some(k) = cfg.warm_start {
        if k == 0 || k > model.schedule.steps() {
            return Err(Error::config(format!("warm start step {k} out of range")));
        }
    }
    let mode = model.mode();
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut current = start;
    let mut replans: Vec<ReplanRecord> = Vec::new();
    let mut failure = None;
    while !cfg.reached(mode, &current, &goal) && replans.len() < cfg.max_replans {
        let batch_seed: u64 = seeds.random();
        let mut local = ChaCha8Rng::seed_from_u64(batch_seed);
        local.set_stream(u64::MAX);
        let inpaint = InpaintSpec {
            mode: cfg.inpaint_mode,
            ..InpaintSpec::new(current, goal, cfg.goal_repeats)
        };
        let req = SampleRequest {
            guidance: &cfg.guidance,
            inpaint: &inpaint,
            world,
            horizon: cfg.horizon,
            batch: cfg.batch,
            seed: batch_seed,
        };
        let chain_start = match (cfg.warm_start, replans.last()) {
            (Some(k), Some(prev)) => ChainStart::Partial {
                k,
                x: warm_iterates(model, &prev.selected_path, cfg.tracked_steps, k, cfg.batch, &mut local)?,
            },
            _ => ChainStart::Noise,
        };
        let batch = match sample_paths_from(model, &req, chain_start) {
            Ok(b) => b,
            Err(e) => {
                failure = Some(format!("replan {}: {e}", replans.len()));
                break;
            }
        };
        let path = batch.selected_path().clone();
        let (reached, executed) = track(&path, cfg.tracked_steps, cfg.tracker_noise, &mut local)?;
        replans.push(ReplanRecord {
            index: replans.len(),
            start: current,
            diagnostics: batch.diagnostics,
            selected: batch.selected,
            selected_path: path,
            executed,
            reached,
        });
        current = reached;
    }
    let termination = if failure.is_some() {
        Termination::Error
    } else if cfg.reached(mode, &current, &goal) {
        Termination::GoalReached
    } else {
        Termination::MaxReplans
    };
    Ok(ExecutionTrace {
        start,
        goal,
        replans,
        termination,
        error: failure,
        final_pose: current,
        final_distance: (current.position - goal.position).norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::ReturnScaling;
    use crate::dataset::Normalization;
    use crate::denoiser::{Denoiser, DenoiserConfig};
    use crate::environment::{fixtures, RewardKind};
    use crate::schedule::ScheduleConfig;

    fn untrained() -> Model {
        let cfg = DenoiserConfig {
            horizon: 16,
            widths: vec![8, 16],
            step_embedding: 8,
            condition_embedding: 8,
            ..DenoiserConfig::default()
        };
        let denoiser = Denoiser::new(cfg).unwrap();
        let params = denoiser.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        Model {
            denoiser,
            params,
            schedule: ScheduleConfig {
                steps: 10,
                ..ScheduleConfig::default()
            }
            .build()
            .unwrap(),
            normalization: Normalization::new(vec![0.5, 0.0, 0.45], vec![0.2, 0.26, 0.2]).unwrap(),
            return_scaling: ReturnScaling::new(-20.0, 0.0),
            reward_kind: RewardKind::dense(),
        }
    }

    fn small_cfg() -> PlanConfig {
        PlanConfig {
            horizon: 16,
            tracked_steps: 6,
            batch: 2,
            goal_repeats: 2,
            max_replans: 3,
            ..PlanConfig::default()
        }
    }

    fn line(n: usize) -> Trajectory {
        Trajectory::straight_line(
            &Pose::from_xyz(0.0, 0.0, 0.0),
            &Pose::from_xyz(1.0, 0.0, 0.0),
            n,
            PoseMode::PositionOnly,
        )
        .unwrap()
    }

    #[test]
    fn defaults() {
        let c = PlanConfig::default();
        assert_eq!((c.horizon, c.tracked_steps, c.batch, c.goal_repeats), (128, 64, 5, 5));
        c.validate().unwrap();
        assert!(PlanConfig { tracked_steps: 124, ..c.clone() }.validate().is_err());
        assert!(PlanConfig { goal_tolerance: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn tracking() {
        let p = line(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (reached, exec) = track(&p, 3, 0.0, &mut rng).unwrap();
        assert_eq!(reached, p.poses()[2]);
        assert_eq!(exec.len(), 3);
        let (first, _) = track(&p, 1, 0.0, &mut rng).unwrap();
        assert_eq!(first, p.poses()[0]);
        let a = track(&p, 3, 0.01, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().0;
        let b = track(&p, 3, 0.01, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, p.poses()[2]);
        assert!(track(&p, 6, 0.0, &mut rng).is_err());
    }

    #[test]
    fn start_at_goal_needs_no_replan() {
        let world = fixtures::single_cuboid();
        let goal = Pose::from_xyz(0.5, 0.35, 0.3);
        let start = Pose::from_xyz(0.5, 0.33, 0.3);
        let trace = plan_and_execute(&untrained(), &world, start, goal, &small_cfg(), 1).unwrap();
        assert!(trace.succeeded());
        assert!(trace.replans.is_empty());
        assert_eq!(trace.executed_path(), vec![start]);
    }

    #[test]
    fn rejects_colliding_endpoints() {
        let world = fixtures::single_cuboid();
        let inside = Pose::from_xyz(0.5, 0.0, 0.3);
        let free = Pose::from_xyz(0.5, 0.35, 0.3);
        assert!(matches!(
            plan_and_execute(&untrained(), &world, inside, free, &small_cfg(), 1),
            Err(Error::InCollision { which: "start" })
        ));
        assert!(matches!(
            plan_and_execute(&untrained(), &world, free, inside, &small_cfg(), 1),
            Err(Error::InCollision { which: "goal" })
        ));
        let outside = Pose::from_xyz(3.0, 0.0, 0.3);
        assert!(matches!(
            plan_and_execute(&untrained(), &world, outside, free, &small_cfg(), 1),
            Err(Error::OutOfBounds { which: "start" })
        ));
    }

    #[test]
    fn replans_reanchor_and_terminate() {
        let world = fixtures::single_cuboid();
        let start = Pose::from_xyz(0.5, -0.35, 0.3);
        let goal = Pose::from_xyz(0.5, 0.35, 0.3);
        for warm_start in [None, Some(5)] {
            let cfg = PlanConfig {
                warm_start,
                ..small_cfg()
            };
            let trace = plan_and_execute(&untrained(), &world, start, goal, &cfg, 9).unwrap();
            assert!(trace.replans.len() <= cfg.max_replans);
            assert_ne!(trace.termination, Termination::Error);
            let mut expected_start = start;
            let mut max_step: f64 = 0.0;
            for r in &trace.replans {
                assert_eq!(r.start, expected_start);
                assert!((r.selected_path.poses()[0].position - r.start.position).norm() < 1e-9);
                assert_eq!(&r.selected_path.poses()[..r.executed.len()], &r.executed[..]);
                expected_start = r.reached;
                max_step = max_step.max(r.selected_path.max_step());
            }
            let exec = trace.executed_path();
            for w in exec.windows(2) {
                assert!((w[1].position - w[0].position).norm() <= max_step + 1e-12);
            }
            let again = plan_and_execute(&untrained(), &world, start, goal, &cfg, 9).unwrap();
            assert_eq!(trace, again);
            let json: serde_json::Value = serde_json::from_str(&trace.to_json()).unwrap();
            assert!(json["termination"].is_string());
            assert_eq!(trace.executed_csv().lines().count(), 1 + exec.len());
        }
    }
}
