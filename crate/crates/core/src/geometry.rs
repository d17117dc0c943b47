//! End-effector poses, rotation log/exp maps, interpolation and the
//! conversion between trajectories and diffusion matrices.
//!
//! Orientations are unit quaternions. In full-pose mode they are diffused
//! as rotation vectors (log-map coordinates), which are unconstrained reals.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Quaternion dot product above which slerp degrades to normalized lerp.
const SLERP_LINEAR_THRESHOLD: f64 = 1.0 - 1e-6;

/// Position (meters) and orientation of the end-effector frame.
///
/// Serialized as `{"position": [x, y, z], "orientation": [w, x, y, z]}`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(from = "PoseDoc", into = "PoseDoc")]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        // Renormalizing guards against quaternions built with new_unchecked.
        let orientation = UnitQuaternion::new_normalize(orientation.into_inner());
        Self {
            position,
            orientation,
        }
    }

    /// Pose with identity orientation.
    pub fn from_position(position: Vector3<f64>) -> Self {
        Self {
            position,
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn from_xyz(x: f64, y: f64, z: f64) -> Self {
        Self::from_position(Vector3::new(x, y, z))
    }

    /// Equality within `tol` on position and on the orientation (up to sign).
    pub fn approx_eq(&self, other: &Pose, tol: f64) -> bool {
        let dp = (self.position - other.position).amax();
        let a = self.orientation.coords;
        let b = other.orientation.coords;
        let dq = (a - b).amax().min((a + b).amax());
        dp <= tol && dq <= tol
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseDoc {
    position: [f64; 3],
    #[serde(default = "identity_wxyz")]
    orientation: [f64; 4],
}

fn identity_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl From<PoseDoc> for Pose {
    fn from(d: PoseDoc) -> Self {
        let [w, x, y, z] = d.orientation;
        Pose::new(
            Vector3::from(d.position),
            UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)),
        )
    }
}

impl From<Pose> for PoseDoc {
    fn from(p: Pose) -> Self {
        let q = p.orientation.quaternion();
        PoseDoc {
            position: [p.position.x, p.position.y, p.position.z],
            orientation: [q.w, q.i, q.j, q.k],
        }
    }
}

impl PartialEq for Pose {
    /// Exact comparison; `q` and `-q` describe the same orientation.
    fn eq(&self, other: &Self) -> bool {
        let a = self.orientation.coords;
        let b = other.orientation.coords;
        self.position == other.position && (a == b || a == -b)
    }
}

/// Rotation vector (axis times angle, radians) of a unit quaternion.
///
/// The result has norm in `[0, pi]` and is the same for `q` and `-q`.
pub fn log_map(orientation: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = orientation.quaternion();
    let norm = q.norm();
    let (mut w, mut v) = (q.w / norm, q.imag() / norm);
    if w < 0.0 || (w == 0.0 && first_nonzero_is_negative(&v)) {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < 1e-12 {
        // angle/s -> 2/w as s -> 0
        return v * (2.0 / w);
    }
    let angle = 2.0 * s.atan2(w);
    v * (angle / s)
}

fn first_nonzero_is_negative(v: &Vector3<f64>) -> bool {
    v.iter().find(|c| **c != 0.0).is_some_and(|c| *c < 0.0)
}

/// Unit quaternion for a rotation vector.
pub fn exp_map(rotation: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = rotation.norm();
    if theta < 1e-12 {
        let half = rotation * 0.5;
        return UnitQuaternion::new_normalize(Quaternion::new(1.0, half.x, half.y, half.z));
    }
    let axis = rotation / theta;
    let (s, c) = (theta * 0.5).sin_cos();
    UnitQuaternion::new_normalize(Quaternion::new(c, s * axis.x, s * axis.y, s * axis.z))
}

/// Spherical linear interpolation along the shorter arc.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, s: f64) -> UnitQuaternion<f64> {
    let qa = a.coords;
    let mut qb = b.coords;
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let coords = if dot > SLERP_LINEAR_THRESHOLD {
        qa * (1.0 - s) + qb * s
    } else {
        let theta = dot.clamp(-1.0, 1.0).acos();
        let sin_theta = theta.sin();
        qa * (((1.0 - s) * theta).sin() / sin_theta) + qb * ((s * theta).sin() / sin_theta)
    };
    UnitQuaternion::new_normalize(Quaternion::from(coords))
}

/// Pose at fraction `s` between `a` and `b`: linear in position, slerp in
/// orientation. The endpoints are returned exactly.
pub fn interpolate(a: &Pose, b: &Pose, s: f64) -> Pose {
    if s <= 0.0 {
        return *a;
    }
    if s >= 1.0 {
        return *b;
    }
    Pose {
        position: a.position + (b.position - a.position) * s,
        orientation: slerp(&a.orientation, &b.orientation, s),
    }
}

/// Squared position distance plus squared norm of the relative rotation's
/// log map.
pub fn se3_distance(a: &Pose, b: &Pose) -> f64 {
    let dp = (a.position - b.position).norm_squared();
    let rel = a.orientation.inverse() * b.orientation;
    dp + log_map(&rel).norm_squared()
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of the rotation exponential at `v`.
fn right_jacobian(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let k = skew(v);
    let k2 = k * k;
    if theta < 1e-6 {
        return Matrix3::identity() - k * 0.5 + k2 * (1.0 / 6.0);
    }
    let t2 = theta * theta;
    Matrix3::identity() - k * ((1.0 - theta.cos()) / t2) + k2 * ((theta - theta.sin()) / (t2 * theta))
}

/// Gradient with respect to the rotation vector `v` of
/// `||log(exp(v)^T R_goal)||^2`.
pub(crate) fn rotation_distance_gradient(
    v: &Vector3<f64>,
    goal: &UnitQuaternion<f64>,
) -> Vector3<f64> {
    let err = log_map(&(exp_map(v).inverse() * goal));
    -2.0 * right_jacobian(v).transpose() * err
}

/// Which coordinates of a pose are diffused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PoseMode {
    /// `(x, y, z)`; orientation is held fixed.
    #[default]
    PositionOnly,
    /// `(x, y, z, rx, ry, rz)` with a rotation vector.
    FullPose,
}

impl PoseMode {
    pub fn dims(self) -> usize {
        match self {
            PoseMode::PositionOnly => 3,
            PoseMode::FullPose => 6,
        }
    }

    pub fn from_dims(dims: usize) -> Result<Self> {
        match dims {
            3 => Ok(PoseMode::PositionOnly),
            6 => Ok(PoseMode::FullPose),
            d => Err(Error::config(format!("unsupported waypoint dimension {d}; expected 3 or 6"))),
        }
    }
}

/// An ordered sequence of poses, equidistant in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    poses: Vec<Pose>,
    mode: PoseMode,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>, mode: PoseMode) -> Result<Self> {
        if poses.len() < 2 {
            return Err(Error::config(format!(
                "trajectory needs at least 2 waypoints, got {}",
                poses.len()
            )));
        }
        Ok(Self { poses, mode })
    }

    /// `n` poses on the straight line from `a` to `b`, at fractions
    /// `t / (n - 1)` so both endpoints are waypoints.
    pub fn straight_line(a: &Pose, b: &Pose, n: usize, mode: PoseMode) -> Result<Self> {
        if n < 2 {
            return Err(Error::config("a straight line needs at least 2 waypoints"));
        }
        let last = (n - 1) as f64;
        let poses = (0..n).map(|t| interpolate(a, b, t as f64 / last)).collect();
        Self::new(poses, mode)
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn mode(&self) -> PoseMode {
        self.mode
    }

    pub fn dims(&self) -> usize {
        self.mode.dims()
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.poses.iter().map(|p| &p.position)
    }

    /// `N x D` matrix with one row per waypoint.
    pub fn flatten(&self, mode: PoseMode) -> Result<Matrix> {
        if mode != self.mode {
            return Err(Error::config(format!(
                "cannot flatten a {:?} trajectory in {:?} mode",
                self.mode, mode
            )));
        }
        let d = mode.dims();
        let mut m = Matrix::zeros(self.poses.len(), d);
        for (t, pose) in self.poses.iter().enumerate() {
            let row = m.row_mut(t);
            row[..3].copy_from_slice(pose.position.as_slice());
            if mode == PoseMode::FullPose {
                row[3..].copy_from_slice(log_map(&pose.orientation).as_slice());
            }
        }
        Ok(m)
    }

    /// Inverse of [`Trajectory::flatten`]. In position-only mode every pose
    /// gets `fixed_orientation`.
    pub fn unflatten(
        m: &Matrix,
        mode: PoseMode,
        fixed_orientation: UnitQuaternion<f64>,
    ) -> Result<Self> {
        if m.cols() != mode.dims() {
            return Err(Error::shape(format!("{} columns", mode.dims()), m.cols()));
        }
        let poses = (0..m.rows())
            .map(|t| {
                let r = m.row(t);
                let position = Vector3::new(r[0], r[1], r[2]);
                let orientation = match mode {
                    PoseMode::PositionOnly => fixed_orientation,
                    PoseMode::FullPose => exp_map(&Vector3::new(r[3], r[4], r[5])),
                };
                Pose {
                    position,
                    orientation,
                }
            })
            .collect();
        Self::new(poses, mode)
    }

    /// Largest distance of any waypoint from the chord joining the endpoints.
    pub fn max_chord_deviation(&self) -> f64 {
        let a = self.poses[0].position;
        let b = self.poses[self.poses.len() - 1].position;
        let ab = b - a;
        let len2 = ab.norm_squared();
        self.positions()
            .map(|p| {
                let ap = p - a;
                if len2 <= f64::EPSILON {
                    return ap.norm();
                }
                let s = (ap.dot(&ab) / len2).clamp(0.0, 1.0);
                (ap - ab * s).norm()
            })
            .fold(0.0, f64::max)
    }

    /// Sum of Euclidean distances between consecutive waypoints.
    pub fn path_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].position - w[0].position).norm())
            .sum()
    }

    /// Largest Euclidean distance between consecutive waypoints.
    pub fn max_step(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].position - w[0].position).norm())
            .fold(0.0, f64::max)
    }
}

/// Rotation angle (radians, in `[0, pi]`) between two orientations.
pub fn orientation_gap(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    log_map(&(a.inverse() * b)).norm().min(PI)
}
