//! Distributed multi-robot navigation by Gaussian belief propagation.
//!
//! Each robot plans a short receding horizon of future states as a factor
//! graph — dynamics, obstacle, and route-following constraints — and refines
//! it by message passing, while nearby robots exchange messages that couple
//! their horizons for mutual avoidance. Global routes come from a sampling
//! planner or an A* search over lane graphs; a deterministic, seeded
//! simulation loop runs whole scenarios and reports collision and
//! path-deviation metrics.

pub mod comms;
pub mod env;
pub mod factors;
pub mod gaussian;
pub mod graph;
pub mod metrics;
pub mod planners;
pub mod robot;
pub mod rng;
pub mod scenario;
pub mod sim;
pub mod types;

pub use env::Environment;
pub use gaussian::InfoGaussian;
pub use graph::{FactorGraph, FactorKind, GraphCtx};
pub use metrics::{CollisionTracker, MetricsRecord};
pub use planners::{GlobalPath, PathSource, PlannerChoice};
pub use robot::{Method, Robot, RobotConfig, RobotStatus};
pub use scenario::{
    failure_sweep, run_scenario, GammaAggregate, ResolvedConfig, RunOptions, ScenarioError,
    ScenarioOutput, ScenarioSpec, SideSpec, SpawnEntry, SpawnModel, SweepResult, SweepRun,
};
pub use sim::{Schedule, SimParams, TrajectoryRow, World};
pub use types::{RobotState, Vec2};

// Downstream code builds nalgebra vectors/matrices when assembling graphs and
// assertions; re-export the crate so versions always match.
pub use nalgebra;
