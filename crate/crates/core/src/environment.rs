//! Static obstacle world: signed distances, rewards, discounted returns and
//! the differentiable guidance cost.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{log_map, rotation_distance_gradient, se3_distance, Pose, PoseMode, Trajectory};
use crate::matrix::Matrix;

/// Default dense-reward decay scale (1/m).
pub const DEFAULT_DECAY: f64 = 46.0;
/// Default discount factor.
pub const DEFAULT_GAMMA: f64 = 0.99;

/// Axis-aligned cuboid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cuboid {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
}

impl Cuboid {
    pub fn new(center: Vector3<f64>, half_extents: Vector3<f64>) -> Result<Self> {
        let c = Self {
            center,
            half_extents,
        };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        if self.half_extents.iter().any(|h| !(*h > 0.0) || !h.is_finite())
            || self.center.iter().any(|c| !c.is_finite())
        {
            return Err(Error::config(format!(
                "cuboid half extents must be positive and finite, got {:?}",
                self.half_extents.as_slice()
            )));
        }
        Ok(())
    }

    pub fn min_corner(&self) -> Vector3<f64> {
        self.center - self.half_extents
    }

    pub fn max_corner(&self) -> Vector3<f64> {
        self.center + self.half_extents
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (p - self.center)
            .iter()
            .zip(self.half_extents.iter())
            .all(|(d, h)| d.abs() <= *h)
    }

    fn overlaps(&self, other: &Cuboid) -> bool {
        (0..3).all(|i| {
            (self.center[i] - other.center[i]).abs() < self.half_extents[i] + other.half_extents[i]
        })
    }

    /// Exact signed distance: negative inside, zero on the surface.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        let q = (p - self.center).abs() - self.half_extents;
        let outside = q.map(|v| v.max(0.0)).norm();
        outside + q.max().min(0.0)
    }

    /// Gradient of [`Cuboid::signed_distance`]. On the measure-zero sets
    /// where the distance is not differentiable one of the one-sided
    /// gradients is returned.
    pub fn sdf_gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let rel = p - self.center;
        let sign = rel.map(|v| if v < 0.0 { -1.0 } else { 1.0 });
        let q = rel.abs() - self.half_extents;
        let qmax = q.max();
        if qmax > 0.0 {
            let pos = q.map(|v| v.max(0.0));
            let n = pos.norm();
            pos.component_mul(&sign) / n
        } else {
            let i = q.imax();
            let mut g = Vector3::zeros();
            g[i] = sign[i];
            g
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldDoc {
    bounds: Cuboid,
    #[serde(default)]
    obstacles: Vec<Cuboid>,
}

/// Workspace bounds plus static cuboid obstacles. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldDoc")]
pub struct World {
    bounds: Cuboid,
    obstacles: Vec<Cuboid>,
}

impl TryFrom<WorldDoc> for World {
    type Error = Error;

    fn try_from(doc: WorldDoc) -> Result<Self> {
        World::new(doc.bounds, doc.obstacles)
    }
}

impl World {
    pub fn new(bounds: Cuboid, obstacles: Vec<Cuboid>) -> Result<Self> {
        bounds.validate()?;
        for (i, o) in obstacles.iter().enumerate() {
            o.validate()?;
            if !o.overlaps(&bounds) {
                return Err(Error::config(format!(
                    "obstacle {i} does not intersect the workspace bounds"
                )));
            }
        }
        Ok(Self { bounds, obstacles })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid world JSON: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("world serializes")
    }

    pub fn bounds(&self) -> &Cuboid {
        &self.bounds
    }

    pub fn obstacles(&self) -> &[Cuboid] {
        &self.obstacles
    }

    pub fn in_bounds(&self, p: &Vector3<f64>) -> bool {
        self.bounds.contains(p)
    }

    /// Length of the workspace diagonal.
    pub fn diagonal(&self) -> f64 {
        2.0 * self.bounds.half_extents.norm()
    }

    /// Index and signed distance of the closest obstacle.
    pub fn nearest_obstacle(&self, p: &Vector3<f64>) -> Option<(usize, f64)> {
        self.obstacles
            .iter()
            .map(|o| o.signed_distance(p))
            .enumerate()
            .fold(None, |best, (i, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((i, d)),
            })
    }

    /// Minimum signed distance over all obstacles; `+inf` with no obstacles.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.nearest_obstacle(p).map_or(f64::INFINITY, |(_, d)| d)
    }

    pub fn in_collision(&self, p: &Vector3<f64>) -> bool {
        self.signed_distance(p) <= 0.0
    }

    pub fn collision_count(&self, poses: &[Pose]) -> usize {
        poses.iter().filter(|p| self.in_collision(&p.position)).count()
    }

    /// Smallest signed distance along a sequence of poses.
    pub fn min_clearance(&self, poses: &[Pose]) -> f64 {
        poses
            .iter()
            .map(|p| self.signed_distance(&p.position))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Built-in worlds shipped as JSON fixtures.
pub mod fixtures {
    use super::World;

    pub const SINGLE_CUBOID_JSON: &str = include_str!("../fixtures/single_cuboid.json");
    pub const TWO_OBSTACLES_JSON: &str = include_str!("../fixtures/two_obstacles.json");

    /// One cuboid standing on the workspace floor.
    pub fn single_cuboid() -> World {
        World::from_json(SINGLE_CUBOID_JSON).expect("fixture is valid")
    }

    /// A large cuboid with a small cube on top of it.
    pub fn two_obstacles() -> World {
        World::from_json(TWO_OBSTACLES_JSON).expect("fixture is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardTag {
    Dense,
    Sparse,
}

impl std::fmt::Display for RewardTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewardTag::Dense => "dense",
            RewardTag::Sparse => "sparse",
        })
    }
}

/// Per-waypoint reward function and discount.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardKind {
    pub tag: RewardTag,
    /// Decay scale `a` (1/m) of the dense reward; ignored for sparse.
    pub decay: f64,
    pub gamma: f64,
}

impl RewardKind {
    pub fn dense() -> Self {
        Self {
            tag: RewardTag::Dense,
            decay: DEFAULT_DECAY,
            gamma: DEFAULT_GAMMA,
        }
    }

    pub fn sparse() -> Self {
        Self {
            tag: RewardTag::Sparse,
            decay: DEFAULT_DECAY,
            gamma: DEFAULT_GAMMA,
        }
    }

    pub fn from_tag(tag: RewardTag) -> Self {
        match tag {
            RewardTag::Dense => Self::dense(),
            RewardTag::Sparse => Self::sparse(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0) {
            return Err(Error::config(format!("reward decay must be positive, got {}", self.decay)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!("discount must lie in (0, 1), got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Reward of one pose, in `[-1, 0]`.
pub fn reward(kind: &RewardKind, world: &World, pose: &Pose) -> f64 {
    let d = world.signed_distance(&pose.position);
    if d <= 0.0 {
        return -1.0;
    }
    match kind.tag {
        RewardTag::Dense => -(-kind.decay * d).exp(),
        RewardTag::Sparse => 0.0,
    }
}

/// Discounted return `sum_t gamma^t r_t` over the waypoints.
pub fn returns(kind: &RewardKind, world: &World, poses: &[Pose]) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for p in poses {
        total += discount * reward(kind, world, p);
        discount *= kind.gamma;
    }
    total
}

/// Batch-selection cost: the negated dense return with default constants,
/// so lower is better.
pub fn selection_cost(world: &World, poses: &[Pose]) -> f64 {
    -returns(&RewardKind::dense(), world, poses)
}

fn ee_cost(pose: &Pose, goal: &Pose, mode: PoseMode) -> f64 {
    match mode {
        PoseMode::PositionOnly => (pose.position - goal.position).norm_squared(),
        PoseMode::FullPose => se3_distance(pose, goal),
    }
}

/// Guidance cost `J`: weighted end-effector and collision terms summed over
/// the interior waypoints `1..N-1`.
pub fn guidance_cost(world: &World, traj: &Trajectory, goal: &Pose, w_ee: f64, w_c: f64) -> f64 {
    let poses = traj.poses();
    let n = poses.len();
    if n < 3 {
        return 0.0;
    }
    poses[1..n - 1]
        .iter()
        .map(|p| {
            let d = world.signed_distance(&p.position);
            let g_c = if d <= 0.0 { -d } else { 0.0 };
            w_ee * ee_cost(p, goal, traj.mode()) + w_c * g_c
        })
        .sum()
}

/// Analytic gradient of [`guidance_cost`] with respect to the flattened
/// trajectory coordinates. Rows 0 and N-1 are zero.
pub fn guidance_gradient(
    world: &World,
    traj: &Trajectory,
    goal: &Pose,
    w_ee: f64,
    w_c: f64,
) -> Matrix {
    let poses = traj.poses();
    let n = poses.len();
    let mode = traj.mode();
    let mut grad = Matrix::zeros(n, mode.dims());
    if n < 3 {
        return grad;
    }
    let goal_q: UnitQuaternion<f64> = goal.orientation;
    for (t, p) in poses.iter().enumerate().take(n - 1).skip(1) {
        let mut g = (p.position - goal.position) * (2.0 * w_ee);
        if w_c != 0.0 {
            if let Some((i, d)) = world.nearest_obstacle(&p.position) {
                if d <= 0.0 {
                    g -= world.obstacles()[i].sdf_gradient(&p.position) * w_c;
                }
            }
        }
        let row = grad.row_mut(t);
        row[..3].copy_from_slice(g.as_slice());
        if mode == PoseMode::FullPose && w_ee != 0.0 {
            let v = log_map(&p.orientation);
            let gr = rotation_distance_gradient(&v, &goal_q) * w_ee;
            row[3..].copy_from_slice(gr.as_slice());
        }
    }
    grad
}
