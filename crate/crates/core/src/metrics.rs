//! Run metrics: edge-triggered collision counting and path-tracking error.
//!
//! Collisions are counted as *events*: a pair (robot–robot or robot–obstacle)
//! that intersects at this sample and did not intersect at the previous one
//! contributes exactly one count, no matter how long the contact persists.
//! Tracking error is the RMSE of the perpendicular distance from each sampled
//! pose to the robot's own planned path.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{dist_point_segment, Environment};
use crate::planners::GlobalPath;
use crate::types::Vec2;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no samples to aggregate")]
    NoSamples,
    #[error("failed to write csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("failed to flush csv: {0}")]
    Io(#[from] std::io::Error),
}

/// Minimum distance from `p` to the polyline, with projections clamped to
/// each segment (so points beyond an endpoint measure to the endpoint).
pub fn perpendicular_distance(p: Vec2, path: &GlobalPath) -> f64 {
    let w = path.waypoints();
    w.windows(2)
        .map(|seg| dist_point_segment(p, seg[0], seg[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Root-mean-square of the per-sample perpendicular distances.
pub fn ppd_rmse(points: &[Vec2], path: &GlobalPath) -> Result<f64, MetricsError> {
    let dists: Vec<f64> = points
        .iter()
        .map(|&p| perpendicular_distance(p, path))
        .collect();
    rmse_of(&dists)
}

pub fn rmse_of(samples: &[f64]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let mean_sq = samples.iter().map(|d| d * d).sum::<f64>() / samples.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Variant that squares the squared distances before averaging (i.e.
/// `sqrt(mean(d^4))`), selectable for comparison with the standard RMSE.
pub fn rmse_literal_of(samples: &[f64]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let mean_quart = samples.iter().map(|d| d * d * d * d).sum::<f64>() / samples.len() as f64;
    Ok(mean_quart.sqrt())
}

/// A disc to collision-check: robot id, center, radius.
#[derive(Debug, Clone, Copy)]
pub struct Body {
    pub id: usize,
    pub pos: Vec2,
    pub radius: f64,
}

/// Edge-triggered collision counter with per-pair contact memory.
#[derive(Debug, Default)]
pub struct CollisionTracker {
    pair_contact: HashMap<(usize, usize), bool>,
    env_contact: HashMap<(usize, usize), bool>,
    inter_robot: u64,
    environment: u64,
}

impl CollisionTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn inter_robot(&self) -> u64 {
        self.inter_robot
    }

    pub fn environment(&self) -> u64 {
        self.environment
    }

    /// Checks every body pair and every body–obstacle pair at the current
    /// sample, counting newly started contacts. Intersection is strict: discs
    /// that exactly touch do not collide.
    pub fn update(&mut self, bodies: &[Body], env: &Environment) {
        for (i, a) in bodies.iter().enumerate() {
            for b in &bodies[i + 1..] {
                let key = if a.id < b.id { (a.id, b.id) } else { (b.id, a.id) };
                let now = (a.pos - b.pos).norm() < a.radius + b.radius;
                let before = self.pair_contact.insert(key, now).unwrap_or(false);
                if now && !before {
                    self.inter_robot += 1;
                }
            }
            for (k, obstacle) in env.obstacles.iter().enumerate() {
                let now = obstacle.signed_distance(a.pos) < a.radius;
                let before = self.env_contact.insert((a.id, k), now).unwrap_or(false);
                if now && !before {
                    self.environment += 1;
                }
            }
        }
    }
}

/// Per-robot outcome and tracking-error samples.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RobotMetrics {
    pub id: usize,
    pub finished: bool,
    pub faulted: bool,
    pub planning_failed: bool,
    /// RMSE of this robot's perpendicular-distance samples (absent when the
    /// robot never produced a sample).
    pub ppd_rmse: Option<f64>,
    /// Perpendicular distance to the robot's own path, one sample per
    /// simulation step while active.
    pub ppd_samples: Vec<f64>,
}

/// Complete result of one simulation run, including the resolved
/// configuration so a record is self-describing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub scenario: String,
    pub seed: u64,
    pub gamma: f64,
    pub method: crate::robot::Method,
    pub planner: crate::planners::PlannerChoice,
    pub inter_robot_collisions: u64,
    pub environment_collisions: u64,
    /// Mean of the per-robot tracking RMSEs.
    pub ppd_rmse_mean: f64,
    /// Population standard deviation of the per-robot tracking RMSEs.
    pub ppd_rmse_std: f64,
    pub spawned_robots: usize,
    pub finished_robots: usize,
    pub faulted_robots: usize,
    pub planning_failures: usize,
    /// True when the duration cap elapsed before every robot finished.
    pub incomplete: bool,
    pub sim_steps: u64,
    /// Singular message marginalizations observed (diagnostic).
    pub singular_updates: u64,
    pub config: crate::scenario::ResolvedConfig,
    pub robots: Vec<RobotMetrics>,
}

pub const CSV_HEADER: [&str; 9] = [
    "scenario",
    "seed",
    "gamma",
    "method",
    "planner",
    "inter_robot_collisions",
    "environment_collisions",
    "ppd_rmse_mean",
    "ppd_rmse_std",
];

impl MetricsRecord {
    pub fn csv_row(&self) -> [String; 9] {
        [
            self.scenario.clone(),
            self.seed.to_string(),
            self.gamma.to_string(),
            self.method.as_str().to_string(),
            self.planner.as_str().to_string(),
            self.inter_robot_collisions.to_string(),
            self.environment_collisions.to_string(),
            self.ppd_rmse_mean.to_string(),
            self.ppd_rmse_std.to_string(),
        ]
    }
}

/// Writes the flat summary table (one row per record) as CSV.
pub fn write_records_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the trajectory log (one row per robot per step) as CSV with header
/// `t,robot_id,x,y`. Floats use the shortest exact representation, so the file
/// round-trips bit-for-bit through [`read_trajectories_csv`].
pub fn write_trajectories_csv<W: Write>(
    rows: &[crate::sim::TrajectoryRow],
    out: W,
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a trajectory log written by [`write_trajectories_csv`].
pub fn read_trajectories_csv(text: &str) -> Result<Vec<crate::sim::TrajectoryRow>, MetricsError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for row in rd.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Mean and population standard deviation of per-robot RMSEs; (0, 0) when no
/// robot produced samples.
pub fn aggregate_rmse(robots: &[RobotMetrics]) -> (f64, f64) {
    let values: Vec<f64> = robots.iter().filter_map(|r| r.ppd_rmse).collect();
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}
