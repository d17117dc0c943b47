//! Synthetic straight-line demonstrations with their returns.
//!
//! Values are kept f32-representable in memory so that a saved and
//! reloaded dataset compares equal to the original.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{returns, RewardKind, World};
use crate::error::{Error, Result};
use crate::format;
use crate::geometry::{Pose, PoseMode, Trajectory};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 8] = b"DDPTRAJ1";
pub const DEFAULT_COUNT: usize = 60_000;
pub const DEFAULT_WAYPOINTS: usize = 32;

/// Per-dimension z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Normalization {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::shape(format!("{} std values", mean.len()), std.len()));
        }
        if let Some(dim) = std.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::ZeroVariance { dim });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("normalization mean".into()));
        }
        Ok(Self { mean, std })
    }

    /// Fits mean and population standard deviation over every row of every
    /// matrix.
    pub fn fit(paths: &[Matrix]) -> Result<Self> {
        if paths.len() < 2 {
            return Err(Error::config(format!(
                "normalization needs at least 2 paths, got {}",
                paths.len()
            )));
        }
        let d = paths[0].cols();
        let mut count = 0usize;
        let mut mean = vec![0.0; d];
        for m in paths {
            if m.cols() != d {
                return Err(Error::shape(format!("{d} columns"), m.cols()));
            }
            for r in 0..m.rows() {
                for (acc, v) in mean.iter_mut().zip(m.row(r)) {
                    *acc += v;
                }
            }
            count += m.rows();
        }
        for v in &mut mean {
            *v /= count as f64;
        }
        let mut var = vec![0.0; d];
        for m in paths {
            for r in 0..m.rows() {
                for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                    *acc += (v - mu).powi(2);
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count as f64).sqrt()).collect();
        for (dim, (s, mu)) in std.iter().zip(&mean).enumerate() {
            if !(*s > 1e-12 * mu.abs().max(1.0)) {
                return Err(Error::ZeroVariance { dim });
            }
        }
        Ok(Self { mean, std })
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    fn check(&self, m: &Matrix) -> Result<()> {
        if m.cols() != self.dims() {
            return Err(Error::shape(format!("{} columns", self.dims()), m.cols()));
        }
        Ok(())
    }

    pub fn normalize(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m)?;
        let d = self.dims();
        Ok(Matrix::from_fn(m.rows(), d, |r, c| (m.get(r, c) - self.mean[c]) / self.std[c]))
    }

    pub fn denormalize(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m)?;
        let d = self.dims();
        Ok(Matrix::from_fn(m.rows(), d, |r, c| m.get(r, c) * self.std[c] + self.mean[c]))
    }

    /// Normalizes a single waypoint row.
    pub fn normalize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Settings for [`generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub count: usize,
    pub waypoints_per_path: usize,
    pub mode: PoseMode,
    pub reward: RewardKind,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: DEFAULT_COUNT,
            waypoints_per_path: DEFAULT_WAYPOINTS,
            mode: PoseMode::PositionOnly,
            reward: RewardKind::dense(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub num_paths: usize,
    pub waypoints_per_path: usize,
    pub dims: usize,
    pub reward_kind: RewardKind,
    pub normalization: Normalization,
    pub world: World,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// Normalized `N x D` trajectory.
    pub matrix: Matrix,
    /// Raw discounted return of the unnormalized path.
    pub return_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    header: DatasetHeader,
    examples: Vec<TrainingExample>,
}

/// Uniformly distributed rotation (Shoemake's subgroup algorithm).
pub fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    UnitQuaternion::from_quaternion(Quaternion::new(
        b * (TAU * u3).cos(),
        a * (TAU * u2).sin(),
        a * (TAU * u2).cos(),
        b * (TAU * u3).sin(),
    ))
}

pub(crate) fn path_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn random_pose(world: &World, mode: PoseMode, rng: &mut impl Rng) -> Pose {
    let (lo, hi) = (world.bounds().min_corner(), world.bounds().max_corner());
    let position = Vector3::from_fn(|i, _| lo[i] + (hi[i] - lo[i]) * rng.random::<f64>());
    match mode {
        PoseMode::PositionOnly => Pose::from_position(position),
        PoseMode::FullPose => Pose::new(position, random_rotation(rng)),
    }
}

/// Unnormalized straight-line paths and their returns. Path `i` depends only
/// on `(seed, i)`.
pub fn generate_paths(world: &World, cfg: &GenerateConfig) -> Result<Vec<(Trajectory, f64)>> {
    if cfg.count == 0 {
        return Err(Error::config("dataset needs at least one path"));
    }
    if cfg.waypoints_per_path < 2 {
        return Err(Error::config("paths need at least 2 waypoints"));
    }
    cfg.reward.validate()?;
    let h = world.bounds().half_extents;
    if let Some(axis) = (0..3).find(|&i| !(h[i] > 0.0)) {
        return Err(Error::config(format!("workspace has zero extent on axis {axis}")));
    }
    (0..cfg.count)
        .map(|i| {
            let mut rng = path_rng(cfg.seed, i);
            let a = random_pose(world, cfg.mode, &mut rng);
            let b = random_pose(world, cfg.mode, &mut rng);
            let traj = Trajectory::straight_line(&a, &b, cfg.waypoints_per_path, cfg.mode)?;
            let ret = returns(&cfg.reward, world, traj.poses());
            Ok((traj, ret))
        })
        .collect()
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates, normalizes and quantizes a dataset.
pub fn generate(world: &World, cfg: &GenerateConfig) -> Result<Dataset> {
    let paths = generate_paths(world, cfg)?;
    let raw: Vec<Matrix> = paths
        .iter()
        .map(|(t, _)| t.flatten(cfg.mode))
        .collect::<Result<_>>()?;
    let normalization = Normalization::fit(&raw)?;
    let examples = raw
        .iter()
        .zip(&paths)
        .map(|(m, (_, ret))| {
            Ok(TrainingExample {
                matrix: normalization.normalize(m)?.map(quantize),
                return_value: quantize(*ret),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let header = DatasetHeader {
        num_paths: examples.len(),
        waypoints_per_path: cfg.waypoints_per_path,
        dims: cfg.mode.dims(),
        reward_kind: cfg.reward,
        normalization,
        world: world.clone(),
    };
    Ok(Dataset { header, examples })
}

impl Dataset {
    pub fn new(header: DatasetHeader, examples: Vec<TrainingExample>) -> Result<Self> {
        PoseMode::from_dims(header.dims)?;
        if header.normalization.dims() != header.dims {
            return Err(Error::shape(
                format!("{} normalization dims", header.dims),
                header.normalization.dims(),
            ));
        }
        if examples.len() != header.num_paths {
            return Err(Error::shape(format!("{} paths", header.num_paths), examples.len()));
        }
        for ex in &examples {
            if ex.matrix.shape() != (header.waypoints_per_path, header.dims) {
                return Err(Error::shape(
                    format!("{}x{}", header.waypoints_per_path, header.dims),
                    format!("{}x{}", ex.matrix.rows(), ex.matrix.cols()),
                ));
            }
            if !ex.matrix.is_finite() || !ex.return_value.is_finite() {
                return Err(Error::NonFinite("training example".into()));
            }
        }
        Ok(Self { header, examples })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn examples(&self) -> &[TrainingExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.header.dims
    }

    pub fn horizon(&self) -> usize {
        self.header.waypoints_per_path
    }

    pub fn mode(&self) -> PoseMode {
        PoseMode::from_dims(self.header.dims).expect("validated on construction")
    }

    pub fn normalization(&self) -> &Normalization {
        &self.header.normalization
    }

    /// Smallest and largest stored return.
    pub fn return_range(&self) -> (f64, f64) {
        self.examples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
            (lo.min(e.return_value), hi.max(e.return_value))
        })
    }

    /// Path `i` in world coordinates.
    pub fn trajectory(&self, i: usize) -> Result<Trajectory> {
        let m = self.normalization().denormalize(&self.examples[i].matrix)?;
        Trajectory::unflatten(&m, self.mode(), UnitQuaternion::identity())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header).map_err(|e| Error::Header(e.to_string()))?;
        let payload = self
            .examples
            .iter()
            .flat_map(|e| e.matrix.as_slice().iter().map(|v| *v as f32))
            .chain(self.examples.iter().map(|e| e.return_value as f32));
        Ok(format::encode(MAGIC, &header, payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = format::decode(bytes, MAGIC)?;
        let header: DatasetHeader = serde_json::from_str(header).map_err(|e| Error::Header(e.to_string()))?;
        let per_path = header
            .waypoints_per_path
            .checked_mul(header.dims)
            .ok_or_else(|| Error::Header("path size overflows".into()))?;
        let count = header
            .num_paths
            .checked_mul(per_path + 1)
            .ok_or_else(|| Error::Header("payload size overflows".into()))?;
        let values = format::read_f32s(payload, count)?;
        let (mats, rets) = values.split_at(header.num_paths * per_path);
        let examples = mats
            .chunks(per_path.max(1))
            .take(header.num_paths)
            .zip(rets)
            .map(|(m, r)| {
                Ok(TrainingExample {
                    matrix: Matrix::from_vec(
                        header.waypoints_per_path,
                        header.dims,
                        m.iter().map(|v| *v as f64).collect(),
                    )?,
                    return_value: *r as f64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(header, examples)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        format::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&format::read_file(path.as_ref())?)
    }
}
