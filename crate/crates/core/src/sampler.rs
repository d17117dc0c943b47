//! Reverse-process sampling with classifier-free guidance, inpainting and
//! cost guidance, plus batch selection.

use std::fmt;
use std::str::FromStr;

use nalgebra::UnitQuaternion;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ReturnScaling};
use crate::dataset::{path_rng, Normalization};
use crate::denoiser::{ConditionInput, Denoiser, ParameterSet};
use crate::environment::{guidance_gradient, returns, selection_cost, RewardKind, RewardTag, World};
use crate::error::{Error, Result};
use crate::geometry::{Pose, PoseMode, Trajectory};
use crate::matrix::Matrix;
use crate::schedule::NoiseSchedule;

pub const DEFAULT_GUIDANCE_WEIGHT: f64 = 1.2;
pub const DEFAULT_DENSE_TARGET: f64 = -0.01;
pub const DEFAULT_SPARSE_TARGET: f64 = 0.0;
pub const DEFAULT_COST_WEIGHT: f64 = 1e-3;
pub const DEFAULT_GOAL_REPEATS: usize = 5;
pub const DEFAULT_BATCH: usize = 5;
pub const DEFAULT_HORIZON: usize = 128;

/// The five conditional-sampling strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Strategy {
    #[default]
    #[serde(rename = "cfg-dense")]
    CfgDense,
    #[serde(rename = "cfg-sparse")]
    CfgSparse,
    #[serde(rename = "cost-only")]
    CostOnly,
    #[serde(rename = "cfg-dense+cost")]
    CfgDenseCost,
    #[serde(rename = "cfg-sparse+cost")]
    CfgSparseCost,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::CfgDense,
        Strategy::CfgSparse,
        Strategy::CostOnly,
        Strategy::CfgDenseCost,
        Strategy::CfgSparseCost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::CfgDense => "cfg-dense",
            Strategy::CfgSparse => "cfg-sparse",
            Strategy::CostOnly => "cost-only",
            Strategy::CfgDenseCost => "cfg-dense+cost",
            Strategy::CfgSparseCost => "cfg-sparse+cost",
        }
    }

    pub fn uses_cfg(self) -> bool {
        self != Strategy::CostOnly
    }

    pub fn uses_cost(self) -> bool {
        matches!(self, Strategy::CostOnly | Strategy::CfgDenseCost | Strategy::CfgSparseCost)
    }

    /// Reward the model must have been trained with, if any.
    pub fn reward_tag(self) -> Option<RewardTag> {
        match self {
            Strategy::CfgDense | Strategy::CfgDenseCost => Some(RewardTag::Dense),
            Strategy::CfgSparse | Strategy::CfgSparseCost => Some(RewardTag::Sparse),
            Strategy::CostOnly => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostTerms {
    pub ee: bool,
    pub collision: bool,
}

impl Default for CostTerms {
    fn default() -> Self {
        Self {
            ee: true,
            collision: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSpec {
    pub strategy: Strategy,
    /// Classifier-free guidance weight.
    pub w: f64,
    /// Raw (unscaled) return to condition on.
    pub target_return: f64,
    pub w_ee: f64,
    pub w_c: f64,
    /// Step size of the cost-gradient shift.
    pub guidance_scale: f64,
    /// Elementwise clip of the shift, in normalized units.
    pub gradient_clip: f64,
    pub cost_terms: CostTerms,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self::for_strategy(Strategy::CfgDense)
    }
}

impl GuidanceSpec {
    /// Defaults for a strategy, including its conventional target return.
    pub fn for_strategy(strategy: Strategy) -> Self {
        let target_return = match strategy.reward_tag() {
            Some(RewardTag::Sparse) => DEFAULT_SPARSE_TARGET,
            _ => DEFAULT_DENSE_TARGET,
        };
        Self {
            strategy,
            w: DEFAULT_GUIDANCE_WEIGHT,
            target_return,
            w_ee: DEFAULT_COST_WEIGHT,
            w_c: DEFAULT_COST_WEIGHT,
            guidance_scale: 1.0,
            gradient_clip: 1.0,
            cost_terms: CostTerms::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w", self.w),
            ("target_return", self.target_return),
            ("w_ee", self.w_ee),
            ("w_c", self.w_c),
            ("guidance_scale", self.guidance_scale),
        ] {
            if !v.is_finite() {
                return Err(Error::config(format!("guidance {name} must be finite")));
            }
        }
        if !(self.gradient_clip > 0.0) {
            return Err(Error::config("gradient clip must be positive"));
        }
        if self.strategy.uses_cost() && !self.cost_terms.ee && !self.cost_terms.collision {
            return Err(Error::config(format!(
                "strategy {} needs at least one cost term",
                self.strategy
            )));
        }
        if self.strategy.uses_cost() && self.effective_weights() == (0.0, 0.0) && self.guidance_scale != 0.0 {
            return Err(Error::config(format!(
                "strategy {} has no enabled cost term with nonzero weight",
                self.strategy
            )));
        }
        Ok(())
    }

    /// `(w_ee, w_c)` after strategy gating. Combined strategies use only the
    /// end-effector term.
    pub fn effective_weights(&self) -> (f64, f64) {
        if !self.strategy.uses_cost() {
            return (0.0, 0.0);
        }
        let w_ee = if self.cost_terms.ee { self.w_ee } else { 0.0 };
        let w_c = match self.strategy {
            Strategy::CostOnly if self.cost_terms.collision => self.w_c,
            _ => 0.0,
        };
        (w_ee, w_c)
    }
}

/// How inpainted rows are written into the noisy iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InpaintMode {
    /// The clean normalized targets at every level.
    #[default]
    Clean,
    /// Targets forward-noised to the current level.
    Renoised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintSpec {
    pub start: Pose,
    pub goal: Pose,
    pub goal_repeats: usize,
    #[serde(default)]
    pub mode: InpaintMode,
}

impl InpaintSpec {
    pub fn new(start: Pose, goal: Pose, goal_repeats: usize) -> Self {
        Self {
            start,
            goal,
            goal_repeats,
            mode: InpaintMode::Clean,
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.goal_repeats == 0 {
            return Err(Error::config("goal repeats must be at least 1"));
        }
        if 2 * self.goal_repeats >= horizon {
            return Err(Error::config(format!(
                "goal repeats {} must be below half the horizon {horizon}",
                self.goal_repeats
            )));
        }
        Ok(())
    }
}

/// A trained denoiser with the statistics needed to sample from it.
#[derive(Debug, Clone)]
pub struct Model {
    pub denoiser: Denoiser,
    pub params: ParameterSet,
    pub schedule: NoiseSchedule,
    pub normalization: Normalization,
    pub return_scaling: ReturnScaling,
    pub reward_kind: RewardKind,
}

impl Model {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            denoiser: ck.denoiser()?,
            params: ck.sampling_params().clone(),
            schedule: ck.schedule()?,
            normalization: ck.header().normalization.clone(),
            return_scaling: ck.header().return_scaling,
            reward_kind: ck.header().reward_kind,
        })
    }

    pub fn mode(&self) -> PoseMode {
        PoseMode::from_dims(self.denoiser.config().dims).expect("validated config")
    }

    /// Normalized waypoint coordinates of a pose.
    pub fn normalize_pose(&self, pose: &Pose) -> Result<Vec<f64>> {
        let row = Trajectory::new(vec![*pose, *pose], self.mode())?.flatten(self.mode())?;
        Ok(self.normalization.normalize_row(row.row(0)))
    }

    pub fn to_trajectory(&self, x: &Matrix, orientation: UnitQuaternion<f64>) -> Result<Trajectory> {
        Trajectory::unflatten(&self.normalization.denormalize(x)?, self.mode(), orientation)
    }

    pub fn check_strategy(&self, g: &GuidanceSpec) -> Result<()> {
        if let Some(tag) = g.strategy.reward_tag() {
            if tag != self.reward_kind.tag {
                return Err(Error::config(format!(
                    "strategy {} needs a {tag}-reward model, but this one was trained with {} rewards",
                    g.strategy, self.reward_kind.tag
                )));
            }
        }
        Ok(())
    }
}

/// `(1 - w) eps_u + w eps_c`, skipping whichever prediction has a zero
/// weight so `w = 0` and `w = 1` are exact.
pub fn guided_noise(
    denoiser: &Denoiser,
    params: &ParameterSet,
    x: &Matrix,
    k: usize,
    cond: ConditionInput,
    w: f64,
) -> Result<Matrix> {
    let mut out = guided_noise_batch(denoiser, params, std::slice::from_ref(x), k, cond, w)?;
    Ok(out.pop().expect("one output"))
}

fn guided_noise_batch(
    denoiser: &Denoiser,
    params: &ParameterSet,
    xs: &[Matrix],
    k: usize,
    cond: ConditionInput,
    w: f64,
) -> Result<Vec<Matrix>> {
    let n = xs.len();
    let steps = vec![k; n];
    if cond.is_null || w == 0.0 {
        return denoiser.predict_noise_batch(params, xs, &steps, &vec![ConditionInput::null(); n]);
    }
    if w == 1.0 {
        return denoiser.predict_noise_batch(params, xs, &steps, &vec![cond; n]);
    }
    let mut both = xs.to_vec();
    both.extend_from_slice(xs);
    let mut conds = vec![ConditionInput::null(); n];
    conds.extend(std::iter::repeat_n(cond, n));
    let preds = denoiser.predict_noise_batch(params, &both, &[steps.clone(), steps].concat(), &conds)?;
    let (unc, con) = preds.split_at(n);
    unc.iter().zip(con).map(|(u, c)| u.axpby(1.0 - w, c, w)).collect()
}

/// Normalized inpainting targets.
#[derive(Debug, Clone)]
struct Targets {
    start: Vec<f64>,
    goal: Vec<f64>,
    repeats: usize,
    mode: InpaintMode,
}

impl Targets {
    fn new(model: &Model, inpaint: &InpaintSpec) -> Result<Self> {
        Ok(Self {
            start: model.normalize_pose(&inpaint.start)?,
            goal: model.normalize_pose(&inpaint.goal)?,
            repeats: inpaint.goal_repeats,
            mode: inpaint.mode,
        })
    }

    fn apply_clean(&self, x: &mut Matrix) {
        let n = x.rows();
        x.row_mut(0).copy_from_slice(&self.start);
        for r in n - self.repeats..n {
            x.row_mut(r).copy_from_slice(&self.goal);
        }
    }

    fn apply(&self, x: &mut Matrix, sched: &NoiseSchedule, k: usize, rng: &mut impl Rng) {
        match self.mode {
            InpaintMode::Clean => self.apply_clean(x),
            InpaintMode::Renoised => {
                let ab = sched.alpha_bar(k);
                let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
                let n = x.rows();
                let rows = std::iter::once((0, &self.start)).chain((n - self.repeats..n).map(|r| (r, &self.goal)));
                for (r, target) in rows {
                    for (v, t) in x.row_mut(r).iter_mut().zip(target) {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = a * t + b * z;
                    }
                }
            }
        }
    }
}

/// Per-batch sampling context shared by every reverse step.
struct Chain<'a> {
    model: &'a Model,
    guidance: &'a GuidanceSpec,
    cond: ConditionInput,
    targets: Targets,
    world: &'a World,
    goal: Pose,
    orientation: UnitQuaternion<f64>,
}

impl<'a> Chain<'a> {
    fn new(model: &'a Model, guidance: &'a GuidanceSpec, inpaint: &InpaintSpec, world: &'a World) -> Result<Self> {
        guidance.validate()?;
        model.check_strategy(guidance)?;
        let cond = if guidance.strategy.uses_cfg() {
            ConditionInput::value(model.return_scaling.scale(guidance.target_return))
        } else {
            ConditionInput::null()
        };
        Ok(Self {
            model,
            guidance,
            cond,
            targets: Targets::new(model, inpaint)?,
            world,
            goal: inpaint.goal,
            orientation: inpaint.start.orientation,
        })
    }

    /// Cost shift in normalized coordinates, evaluated at `mu`.
    fn cost_shift(&self, mu: &Matrix) -> Result<Option<Matrix>> {
        let (w_ee, w_c) = self.guidance.effective_weights();
        if self.guidance.guidance_scale == 0.0 || (w_ee == 0.0 && w_c == 0.0) {
            return Ok(None);
        }
        let traj = self.model.to_trajectory(mu, self.orientation)?;
        let grad = guidance_gradient(self.world, &traj, &self.goal, w_ee, w_c);
        let std = self.model.normalization.std();
        let clip = self.guidance.gradient_clip;
        let lambda = self.guidance.guidance_scale;
        Ok(Some(Matrix::from_fn(grad.rows(), grad.cols(), |r, c| {
            lambda * (grad.get(r, c) / std[c]).clamp(-clip, clip)
        })))
    }

    fn step(&self, xs: &mut [Matrix], k: usize, rngs: &mut [ChaCha8Rng], first_path: usize) -> Result<()> {
        for (x, rng) in xs.iter_mut().zip(rngs.iter_mut()) {
            self.targets.apply(x, &self.model.schedule, k, rng);
        }
        let w = if self.guidance.strategy.uses_cfg() { self.guidance.w } else { 0.0 };
        denoise(self.model, xs, k, rngs, self.cond, w, first_path, |mu| self.cost_shift(mu))
    }
}

/// Replaces each `x_k` with a draw of `x_{k-1}`.
#[allow(clippy::too_many_arguments)]
fn denoise(
    model: &Model,
    xs: &mut [Matrix],
    k: usize,
    rngs: &mut [ChaCha8Rng],
    cond: ConditionInput,
    w: f64,
    first_path: usize,
    shift: impl Fn(&Matrix) -> Result<Option<Matrix>>,
) -> Result<()> {
    let sched = &model.schedule;
    let eps = guided_noise_batch(&model.denoiser, &model.params, xs, k, cond, w)?;
    let sigma = sched.sigma(k);
    for (i, ((x, e), rng)) in xs.iter_mut().zip(&eps).zip(rngs.iter_mut()).enumerate() {
        let x0 = sched.x0_from_noise(x, k, e)?;
        let mut mu = sched.posterior_mean(x, &x0, k)?;
        if let Some(s) = shift(&mu)? {
            mu = mu.axpby(1.0, &s, -1.0)?;
        }
        if k > 1 {
            for v in mu.as_mut_slice() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
        if !mu.is_finite() {
            return Err(Error::NonFiniteStep {
                step: k,
                path: Some(first_path + i),
            });
        }
        *x = mu;
    }
    Ok(())
}

/// One reverse step `x_k -> x_{k-1}` for a single path.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    model: &Model,
    x: &Matrix,
    k: usize,
    guidance: &GuidanceSpec,
    inpaint: &InpaintSpec,
    world: &World,
    rng: &mut ChaCha8Rng,
) -> Result<Matrix> {
    if k == 0 || k > model.schedule.steps() {
        return Err(Error::config(format!(
            "reverse step {k} outside 1..={}",
            model.schedule.steps()
        )));
    }
    inpaint.validate(x.rows())?;
    let chain = Chain::new(model, guidance, inpaint, world)?;
    let mut xs = vec![x.clone()];
    chain.step(&mut xs, k, std::slice::from_mut(rng), 0).map_err(|e| match e {
        Error::NonFiniteStep { step, .. } => Error::NonFiniteStep { step, path: None },
        other => other,
    })?;
    Ok(xs.pop().expect("one path"))
}

/// Per-path evaluation of a sampled batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathDiagnostics {
    pub selection_cost: f64,
    pub dense_return: f64,
    pub sparse_return: f64,
    pub collisions: usize,
    /// Distance from the last freely generated waypoint to the goal.
    pub goal_gap: f64,
    pub min_clearance: f64,
}

impl PathDiagnostics {
    pub fn evaluate(world: &World, traj: &Trajectory, goal: &Pose, goal_repeats: usize) -> Self {
        let poses = traj.poses();
        let last_free = poses.len().saturating_sub(goal_repeats + 1);
        Self {
            selection_cost: selection_cost(world, poses),
            dense_return: returns(&RewardKind::dense(), world, poses),
            sparse_return: returns(&RewardKind::sparse(), world, poses),
            collisions: world.collision_count(poses),
            goal_gap: (poses[last_free].position - goal.position).norm(),
            min_clearance: world.min_clearance(poses),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub paths: Vec<Trajectory>,
    pub diagnostics: Vec<PathDiagnostics>,
    pub selected: usize,
}

#[derive(Serialize)]
struct DiagnosticsDoc<'a> {
    selected: usize,
    paths: Vec<DiagnosticsRow<'a>>,
}

#[derive(Serialize)]
struct DiagnosticsRow<'a> {
    index: usize,
    #[serde(flatten)]
    diagnostics: &'a PathDiagnostics,
}

impl SampleBatch {
    pub fn selected_path(&self) -> &Trajectory {
        &self.paths[self.selected]
    }

    /// `path_index,waypoint_index,x,y,z[,rx,ry,rz]`.
    pub fn to_csv(&self) -> Result<String> {
        paths_csv(&self.paths)
    }

    pub fn diagnostics_json(&self) -> String {
        let doc = DiagnosticsDoc {
            selected: self.selected,
            paths: self
                .diagnostics
                .iter()
                .enumerate()
                .map(|(index, diagnostics)| DiagnosticsRow { index, diagnostics })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("diagnostics serialize")
    }
}

pub fn paths_csv(paths: &[Trajectory]) -> Result<String> {
    use std::fmt::Write;
    let full = paths.first().is_some_and(|p| p.mode() == PoseMode::FullPose);
    let mut out = String::from("path_index,waypoint_index,x,y,z");
    if full {
        out.push_str(",rx,ry,rz");
    }
    out.push('\n');
    for (i, p) in paths.iter().enumerate() {
        let m = p.flatten(p.mode())?;
        for t in 0..m.rows() {
            write!(out, "{i},{t}").expect("string write");
            for v in m.row(t) {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Index of the lowest selection cost; ties go to the lowest index.
pub fn select_index(costs: &[f64]) -> Result<usize> {
    if costs.is_empty() {
        return Err(Error::Empty("path batch"));
    }
    let mut best = 0;
    for (i, c) in costs.iter().enumerate().skip(1) {
        if *c < costs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Picks the path with the highest dense return.
pub fn select<'a>(paths: &'a [Trajectory], world: &World) -> Result<(usize, &'a Trajectory)> {
    let costs: Vec<f64> = paths.iter().map(|p| selection_cost(world, p.poses())).collect();
    let i = select_index(&costs)?;
    Ok((i, &paths[i]))
}

/// Where each path's reverse chain starts.
#[derive(Debug, Clone)]
pub enum ChainStart {
    /// Pure noise at step `K`.
    Noise,
    /// Given iterates at step `k`, e.g. a re-noised previous plan.
    Partial { k: usize, x: Vec<Matrix> },
}

/// Sampling request shared by [`sample_paths`] and the planner.
#[derive(Debug, Clone)]
pub struct SampleRequest<'a> {
    pub guidance: &'a GuidanceSpec,
    pub inpaint: &'a InpaintSpec,
    pub world: &'a World,
    pub horizon: usize,
    pub batch: usize,
    pub seed: u64,
}

/// Runs `batch` independent reverse chains of `horizon` waypoints. Path `i`
/// draws only from the rng stream `(seed, i)`.
pub fn sample_paths(model: &Model, req: &SampleRequest<'_>) -> Result<SampleBatch> {
    sample_paths_from(model, req, ChainStart::Noise)
}

pub fn sample_paths_from(model: &Model, req: &SampleRequest<'_>, start: ChainStart) -> Result<SampleBatch> {
    if req.batch == 0 {
        return Err(Error::config("batch must contain at least one path"));
    }
    if req.horizon < 2 + req.inpaint.goal_repeats {
        return Err(Error::config("horizon too short for the inpainted rows"));
    }
    req.inpaint.validate(req.horizon)?;
    if !model.denoiser.supports_horizon(req.horizon) {
        return Err(Error::config(format!(
            "the model cannot sample horizon {}",
            req.horizon
        )));
    }
    let chain = Chain::new(model, req.guidance, req.inpaint, req.world)?;
    let d = model.denoiser.config().dims;
    let mut rngs: Vec<ChaCha8Rng> = (0..req.batch).map(|i| path_rng(req.seed, i)).collect();
    let (k_start, mut xs) = match start {
        ChainStart::Noise => {
            let xs = rngs
                .iter_mut()
                .map(|rng| Matrix::from_fn(req.horizon, d, |_, _| rng.sample(StandardNormal)))
                .collect();
            (model.schedule.steps(), xs)
        }
        ChainStart::Partial { k, x } => {
            if k == 0 || k > model.schedule.steps() {
                return Err(Error::config(format!("warm start step {k} out of range")));
            }
            if x.len() != req.batch || x.iter().any(|m| m.shape() != (req.horizon, d)) {
                return Err(Error::shape(
                    format!("{} iterates of {}x{d}", req.batch, req.horizon),
                    format!("{} iterates", x.len()),
                ));
            }
            (k, x)
        }
    };
    for k in (1..=k_start).rev() {
        chain.step(&mut xs, k, &mut rngs, 0)?;
    }
    let mut paths = Vec::with_capacity(req.batch);
    let mut diagnostics = Vec::with_capacity(req.batch);
    for x in &mut xs {
        chain.targets.apply_clean(x);
        let traj = model.to_trajectory(x, req.inpaint.start.orientation)?;
        diagnostics.push(PathDiagnostics::evaluate(
            req.world,
            &traj,
            &req.inpaint.goal,
            req.inpaint.goal_repeats,
        ));
        paths.push(traj);
    }
    let costs: Vec<f64> = diagnostics.iter().map(|d| d.selection_cost).collect();
    let selected = select_index(&costs)?;
    Ok(SampleBatch {
        paths,
        diagnostics,
        selected,
    })
}

/// Draws from the learned path distribution with the null condition, no
/// inpainting and no cost guidance. Path `i` uses rng stream `(seed, i)`.
pub fn sample_unconditional(model: &Model, horizon: usize, batch: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if batch == 0 {
        return Err(Error::config("batch must contain at least one path"));
    }
    if !model.denoiser.supports_horizon(horizon) {
        return Err(Error::config(format!("the model cannot sample horizon {horizon}")));
    }
    let d = model.denoiser.config().dims;
    let mut rngs: Vec<ChaCha8Rng> = (0..batch).map(|i| path_rng(seed, i)).collect();
    let mut xs: Vec<Matrix> = rngs
        .iter_mut()
        .map(|rng| Matrix::from_fn(horizon, d, |_, _| rng.sample(StandardNormal)))
        .collect();
    for k in (1..=model.schedule.steps()).rev() {
        denoise(model, &mut xs, k, &mut rngs, ConditionInput::null(), 0.0, 0, |_| Ok(None))?;
    }
    xs.iter()
        .map(|x| model.to_trajectory(x, UnitQuaternion::identity()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::fixtures;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::ScheduleConfig;
    use proptest::prelude::{prop, prop_assert_eq, proptest};
    use rand::SeedableRng;

    pub(crate) fn untrained(tag: RewardTag, steps: usize) -> Model {
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
                steps,
                ..ScheduleConfig::default()
            }
            .build()
            .unwrap(),
            normalization: Normalization::new(vec![0.5, 0.0, 0.45], vec![0.2, 0.26, 0.2]).unwrap(),
            return_scaling: ReturnScaling::new(-20.0, 0.0),
            reward_kind: RewardKind::from_tag(tag),
        }
    }

    fn scenario() -> InpaintSpec {
        InpaintSpec::new(Pose::from_xyz(0.5, -0.35, 0.3), Pose::from_xyz(0.5, 0.35, 0.3), 2)
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert!("cfg".parse::<Strategy>().is_err());
    }

    #[test]
    fn combined_strategies_drop_collision_cost() {
        for s in [Strategy::CfgDenseCost, Strategy::CfgSparseCost] {
            assert_eq!(GuidanceSpec::for_strategy(s).effective_weights(), (1e-3, 0.0));
        }
        assert_eq!(GuidanceSpec::for_strategy(Strategy::CostOnly).effective_weights(), (1e-3, 1e-3));
        assert_eq!(GuidanceSpec::for_strategy(Strategy::CfgDense).effective_weights(), (0.0, 0.0));
        let mut g = GuidanceSpec::for_strategy(Strategy::CostOnly);
        g.cost_terms = CostTerms { ee: false, collision: false };
        assert!(g.validate().is_err());
    }

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let g = GuidanceSpec::default();
        assert_eq!((g.w, g.target_return), (1.2, -0.01));
        assert_eq!(GuidanceSpec::for_strategy(Strategy::CfgSparse).target_return, 0.0);
        assert_eq!((DEFAULT_BATCH, DEFAULT_HORIZON, DEFAULT_GOAL_REPEATS), (5, 128, 5));
    }

    #[test]
    fn cfg_degenerate_weights_are_exact() {
        let m = untrained(RewardTag::Dense, 20);
        let x = Matrix::from_fn(16, 3, |r, c| ((r * 3 + c) as f64).sin());
        let cond = ConditionInput::value(0.7);
        let unc = m.denoiser.predict_noise(&m.params, &x, 9, ConditionInput::null()).unwrap();
        let con = m.denoiser.predict_noise(&m.params, &x, 9, cond).unwrap();
        assert_eq!(guided_noise(&m.denoiser, &m.params, &x, 9, cond, 0.0).unwrap(), unc);
        assert_eq!(guided_noise(&m.denoiser, &m.params, &x, 9, cond, 1.0).unwrap(), con);
        let g = guided_noise(&m.denoiser, &m.params, &x, 9, cond, 1.2).unwrap();
        let want = unc.axpby(1.0, &con.axpby(1.0, &unc, -1.0).unwrap(), 1.2).unwrap();
        for (a, b) in g.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cfg_scalar_probe() {
        let u = Matrix::zeros(1, 1);
        let c = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        assert_eq!(u.axpby(1.0 - 1.2, &c, 1.2).unwrap().get(0, 0), 1.2);
    }

    #[test]
    fn zero_scale_matches_plain_step() {
        let m = untrained(RewardTag::Dense, 20);
        let world = fixtures::single_cuboid();
        let x = Matrix::from_fn(16, 3, |r, c| ((r + 2 * c) as f64).cos());
        let mut plain = GuidanceSpec::for_strategy(Strategy::CfgDense);
        plain.w = 1.0;
        let mut cost = GuidanceSpec::for_strategy(Strategy::CfgDenseCost);
        cost.w = 1.0;
        cost.guidance_scale = 0.0;
        let inpaint = scenario();
        let a = reverse_step(&m, &x, 7, &plain, &inpaint, &world, &mut path_rng(1, 0)).unwrap();
        let b = reverse_step(&m, &x, 7, &cost, &inpaint, &world, &mut path_rng(1, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_cost_gives_no_shift() {
        let m = untrained(RewardTag::Dense, 20);
        let empty = World::new(*fixtures::single_cuboid().bounds(), vec![]).unwrap();
        let mut g = GuidanceSpec::for_strategy(Strategy::CostOnly);
        g.w_ee = 0.0;
        let inpaint = scenario();
        let chain = Chain::new(&m, &g, &inpaint, &empty).unwrap();
        let mu = Matrix::from_fn(16, 3, |r, c| (r as f64 - c as f64) * 0.1);
        let shift = chain.cost_shift(&mu).unwrap().unwrap();
        assert!(shift.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn inpainted_rows_and_determinism() {
        let m = untrained(RewardTag::Dense, 30);
        let world = fixtures::single_cuboid();
        for repeats in [1, 5] {
            let inpaint = InpaintSpec::new(Pose::from_xyz(0.5, -0.35, 0.3), Pose::from_xyz(0.5, 0.35, 0.3), repeats);
            let g = GuidanceSpec::default();
            let req = SampleRequest {
                guidance: &g,
                inpaint: &inpaint,
                world: &world,
                horizon: 16,
                batch: 4,
                seed: 5,
            };
            let a = sample_paths(&m, &req).unwrap();
            let b = sample_paths(&m, &req).unwrap();
            assert_eq!(a, b);
            for p in &a.paths {
                let poses = p.poses();
                assert!((poses[0].position - inpaint.start.position).norm() < 1e-6);
                for q in &poses[16 - repeats..] {
                    assert!((q.position - inpaint.goal.position).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn paths_do_not_depend_on_batch_size() {
        let m = untrained(RewardTag::Dense, 10);
        let world = fixtures::single_cuboid();
        let g = GuidanceSpec::default();
        let inpaint = scenario();
        let req = |batch| SampleRequest {
            guidance: &g,
            inpaint: &inpaint,
            world: &world,
            horizon: 16,
            batch,
            seed: 8,
        };
        let one = sample_paths(&m, &req(1)).unwrap();
        let three = sample_paths(&m, &req(3)).unwrap();
        for (a, b) in one.paths[0].positions().zip(three.paths[0].positions()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn cost_only_never_conditions() {
        let m = untrained(RewardTag::Sparse, 10);
        let world = fixtures::single_cuboid();
        let g = GuidanceSpec::for_strategy(Strategy::CostOnly);
        let inpaint = scenario();
        m.denoiser.reset_conditional_evaluations();
        let req = SampleRequest {
            guidance: &g,
            inpaint: &inpaint,
            world: &world,
            horizon: 16,
            batch: 2,
            seed: 1,
        };
        sample_paths(&m, &req).unwrap();
        assert_eq!(m.denoiser.conditional_evaluations(), 0);
        let cfg = GuidanceSpec::for_strategy(Strategy::CfgSparse);
        sample_paths(&m, &SampleRequest { guidance: &cfg, ..req }).unwrap();
        assert!(m.denoiser.conditional_evaluations() > 0);
    }

    #[test]
    fn unconditional_sampling_is_null_only_and_deterministic() {
        let m = untrained(RewardTag::Dense, 10);
        m.denoiser.reset_conditional_evaluations();
        let a = sample_unconditional(&m, 16, 3, 4).unwrap();
        assert_eq!(m.denoiser.conditional_evaluations(), 0);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|p| p.len() == 16));
        let b = sample_unconditional(&m, 16, 3, 4).unwrap();
        let flat = |v: &[Trajectory]| v.iter().map(|p| p.flatten(PoseMode::PositionOnly).unwrap()).collect::<Vec<_>>();
        assert_eq!(flat(&a), flat(&b));
        assert!(sample_unconditional(&m, 15, 1, 0).is_err());
        assert!(sample_unconditional(&m, 16, 0, 0).is_err());
    }

    #[test]
    fn strategy_must_match_the_model() {
        let m = untrained(RewardTag::Sparse, 10);
        let world = fixtures::single_cuboid();
        let g = GuidanceSpec::for_strategy(Strategy::CfgDense);
        let inpaint = scenario();
        let req = SampleRequest {
            guidance: &g,
            inpaint: &inpaint,
            world: &world,
            horizon: 16,
            batch: 1,
            seed: 1,
        };
        assert!(matches!(sample_paths(&m, &req), Err(Error::Config(_))));
        assert!(sample_paths(&m, &SampleRequest { horizon: 12, ..req.clone() }).is_err());
        let bad = InpaintSpec::new(inpaint.start, inpaint.goal, 8);
        assert!(sample_paths(&m, &SampleRequest { inpaint: &bad, ..req }).is_err());
    }

    #[test]
    fn csv_and_json_exports() {
        let m = untrained(RewardTag::Dense, 5);
        let world = fixtures::single_cuboid();
        let g = GuidanceSpec::default();
        let inpaint = scenario();
        let batch = sample_paths(
            &m,
            &SampleRequest {
                guidance: &g,
                inpaint: &inpaint,
                world: &world,
                horizon: 16,
                batch: 2,
                seed: 1,
            },
        )
        .unwrap();
        let csv = batch.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "path_index,waypoint_index,x,y,z");
        assert_eq!(lines.len(), 1 + 32);
        assert!(lines[17].starts_with("1,0,"));
        let doc: serde_json::Value = serde_json::from_str(&batch.diagnostics_json()).unwrap();
        assert_eq!(doc["selected"], batch.selected);
        assert_eq!(doc["paths"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_index(&[3.0, 1.0, 2.0]).unwrap(), 1);
        assert_eq!(select_index(&[4.0]).unwrap(), 0);
        assert_eq!(select_index(&[2.0, 2.0, 2.0]).unwrap(), 0);
        assert!(select_index(&[]).is_err());
        let world = fixtures::single_cuboid();
        let through = Trajectory::straight_line(
            &Pose::from_xyz(0.5, -0.35, 0.3),
            &Pose::from_xyz(0.5, 0.35, 0.3),
            16,
            PoseMode::PositionOnly,
        )
        .unwrap();
        let around = Trajectory::straight_line(
            &Pose::from_xyz(0.2, -0.35, 0.7),
            &Pose::from_xyz(0.2, 0.35, 0.7),
            16,
            PoseMode::PositionOnly,
        )
        .unwrap();
        assert_eq!(select(&[through, around], &world).unwrap().0, 1);
    }

    proptest! {
        #[test]
        fn lower_cost_replacement_wins(
            costs in prop::collection::vec(0.0f64..10.0, 1..12),
            slot in 0usize..12,
        ) {
            let slot = slot % costs.len();
            let mut replaced = costs.clone();
            replaced[slot] = costs.iter().cloned().fold(f64::INFINITY, f64::min) - 0.5;
            prop_assert_eq!(select_index(&replaced).unwrap(), slot);
        }
    }
}
