//! Path-quality metrics for sweeps and executed plans.

use ddp_core::environment::World;
use ddp_core::geometry::Pose;
use serde::{Deserialize, Serialize};

/// Metrics of a single path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathMetrics {
    /// Fraction of waypoints with signed distance `<= 0`.
    pub collision_rate: f64,
    pub goal_gap: f64,
    pub path_length: f64,
    pub success: bool,
}

impl PathMetrics {
    /// `goal_repeats` inpainted goal rows are skipped when measuring the gap,
    /// so it is taken at the last freely generated waypoint.
    pub fn of(world: &World, poses: &[Pose], goal: &Pose, goal_repeats: usize, tolerance: f64) -> Self {
        let n = poses.len().max(1);
        let collisions = poses.iter().filter(|p| world.signed_distance(&p.position) <= 0.0).count();
        let goal_gap = poses
            .get(poses.len().saturating_sub(goal_repeats + 1))
            .map_or(f64::INFINITY, |p| (p.position - goal.position).norm());
        let path_length = poses
            .windows(2)
            .map(|w| (w[1].position - w[0].position).norm())
            .sum();
        Self {
            collision_rate: collisions as f64 / n as f64,
            goal_gap,
            path_length,
            success: collisions == 0 && goal_gap <= tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub paths: usize,
    pub collision_rate: f64,
    pub collision_free_fraction: f64,
    pub mean_goal_gap: f64,
    pub mean_path_length: f64,
    pub success_rate: f64,
}

impl Aggregate {
    pub fn of(items: &[PathMetrics]) -> Self {
        let n = items.len().max(1) as f64;
        let mean = |f: &dyn Fn(&PathMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            paths: items.len(),
            collision_rate: mean(&|m| m.collision_rate),
            collision_free_fraction: mean(&|m| f64::from(u8::from(m.collision_rate == 0.0))),
            mean_goal_gap: mean(&|m| m.goal_gap),
            mean_path_length: mean(&|m| m.path_length),
            success_rate: mean(&|m| f64::from(u8::from(m.success))),
        }
    }
}
