//! Declarative scenario definitions and the run/sweep entry points.
//!
//! A scenario file names an environment, a tracking method, a planner, and a
//! spawn model, plus optional parameter overrides. Unspecified knobs resolve
//! to the shipped defaults, and the fully resolved configuration is echoed
//! into every result record so a record is reproducible on its own.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Environment};
use crate::factors::{FactorParams, TrackingParams};
use crate::metrics::{MetricsError, MetricsRecord};
use crate::planners::PlannerChoice;
use crate::robot::{Method, RobotConfig};
use crate::rng::{derive_run_seed, stream_rng, STREAM_SPAWN};
use crate::sim::{Schedule, SimParams, SpawnRequest, TrajectoryRow, World};
use crate::types::Vec2;
use rand::Rng;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid scenario file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// One side of a crossing (or one endpoint pad of any map): where robots
/// appear and where robots headed here should stop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideSpec {
    pub spawn: [f64; 2],
    pub goal: [f64; 2],
}

/// An explicit spawn assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnEntry {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    /// Seconds after run start at which this robot becomes due.
    #[serde(default)]
    pub delay: f64,
}

/// How robots enter the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpawnModel {
    /// Each robot draws a uniform entry side and a uniform goal among the
    /// remaining sides; robots are due at a fixed rate.
    JunctionRandomSides {
        count: usize,
        /// Robots per second.
        rate: f64,
        sides: Vec<SideSpec>,
    },
    /// A literal list of spawn assignments.
    FixedList { entries: Vec<SpawnEntry> },
}

impl SpawnModel {
    pub fn robot_count(&self) -> usize {
        match self {
            SpawnModel::JunctionRandomSides { count, .. } => *count,
            SpawnModel::FixedList { entries } => entries.len(),
        }
    }
}

/// Optional knob overrides; anything left `None` takes the default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamOverrides {
    pub robot_radius: Option<f64>,
    pub comms_radius: Option<f64>,
    pub gamma: Option<f64>,
    pub target_speed: Option<f64>,
    pub horizon: Option<f64>,
    pub k_variables: Option<usize>,
    pub t_internal: Option<usize>,
    pub t_external: Option<usize>,
    pub schedule: Option<Schedule>,
    pub sigma_pose: Option<f64>,
    pub sigma_dynamics: Option<f64>,
    pub sigma_interrobot: Option<f64>,
    pub sigma_obstacle: Option<f64>,
    pub sigma_tracking: Option<f64>,
    pub r_switch: Option<f64>,
    pub s_v: Option<f64>,
    pub d_a: Option<f64>,
    pub d_i: Option<f64>,
    pub d_o: Option<f64>,
    pub dt_sim: Option<f64>,
    pub damping: Option<f64>,
    pub sdf_cell: Option<f64>,
    pub rrt_step: Option<f64>,
    pub rrt_max_iters: Option<usize>,
    pub rrt_goal_bias: Option<f64>,
    pub rrt_rewire_gamma: Option<f64>,
}

/// A scenario file, as parsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    /// Environment file path, relative to the scenario file's directory.
    pub environment: String,
    pub method: Method,
    pub planner: PlannerChoice,
    pub spawn: SpawnModel,
    #[serde(default)]
    pub overrides: ParamOverrides,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Simulated-seconds cap (default 300).
    #[serde(default)]
    pub duration: Option<f64>,
    /// Post-process planned paths (default: on for WT, off for PT).
    #[serde(default)]
    pub simplify: Option<bool>,
}

impl ScenarioSpec {
    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }
}

/// Every knob of a run, defaults filled in. Echoed into each MetricsRecord.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub environment: String,
    pub method: Method,
    pub planner: PlannerChoice,
    pub spawn: SpawnModel,
    pub seed: u64,
    pub gamma: f64,
    pub robot_radius: f64,
    pub comms_radius: f64,
    pub target_speed: f64,
    pub horizon: f64,
    pub k_variables: usize,
    pub t_internal: usize,
    pub t_external: usize,
    pub schedule: Schedule,
    pub sigma_pose: f64,
    pub sigma_dynamics: f64,
    pub sigma_interrobot: f64,
    pub sigma_obstacle: f64,
    pub sigma_tracking: f64,
    pub r_switch: f64,
    pub s_v: f64,
    pub d_a: f64,
    pub d_i: f64,
    pub d_o: f64,
    pub dt_sim: f64,
    pub damping: f64,
    pub sdf_cell: f64,
    pub duration: f64,
    pub simplify: bool,
    /// Aggregate tracking error with the fourth-power variant.
    pub ppd_literal: bool,
    pub rrt_step: f64,
    pub rrt_max_iters: usize,
    pub rrt_goal_bias: f64,
    pub rrt_rewire_gamma: Option<f64>,
}

/// Caller-side knobs that are not part of the scenario file.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Wins over the scenario's own seed.
    pub seed_override: Option<u64>,
    /// Wins over the scenario's own simplify flag.
    pub simplify_override: Option<bool>,
    pub record_trajectories: bool,
    pub ppd_literal: bool,
}

fn positive(value: f64, what: &str) -> Result<f64, ScenarioError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(ScenarioError::Invalid(format!("{what} must be positive, got {value}")))
    }
}

/// Fills defaults, applies overrides, and validates physical ranges.
pub fn resolve(spec: &ScenarioSpec, opts: &RunOptions) -> Result<ResolvedConfig, ScenarioError> {
    let o = &spec.overrides;
    let robot_radius = positive(o.robot_radius.unwrap_or(2.0), "robot_radius")?;
    let comms_radius = positive(o.comms_radius.unwrap_or(20.0), "comms_radius")?;
    let target_speed = positive(o.target_speed.unwrap_or(5.0), "target_speed")?;
    let horizon = positive(o.horizon.unwrap_or(5.0), "horizon")?;
    let gamma = o.gamma.unwrap_or(0.0);
    if !(0.0..=1.0).contains(&gamma) {
        return Err(ScenarioError::Invalid(format!(
            "gamma must be in [0, 1], got {gamma}"
        )));
    }
    let k_variables = o.k_variables.unwrap_or(10);
    if k_variables < 2 {
        return Err(ScenarioError::Invalid(
            "k_variables must be at least 2".into(),
        ));
    }
    let t_internal = o.t_internal.unwrap_or(10);
    let t_external = o.t_external.unwrap_or(10);
    if t_internal == 0 {
        return Err(ScenarioError::Invalid("t_internal must be at least 1".into()));
    }
    let damping = o.damping.unwrap_or(0.0);
    if !(0.0..=0.7).contains(&damping) {
        return Err(ScenarioError::Invalid(format!(
            "damping must be in [0, 0.7], got {damping}"
        )));
    }
    let duration = positive(spec.duration.unwrap_or(300.0), "duration")?;
    let dt_sim = positive(o.dt_sim.unwrap_or(0.1), "dt_sim")?;

    match &spec.spawn {
        SpawnModel::JunctionRandomSides { rate, sides, .. } => {
            positive(*rate, "spawn rate")?;
            if sides.len() < 2 {
                return Err(ScenarioError::Invalid(
                    "junction_random_sides needs at least two sides".into(),
                ));
            }
        }
        SpawnModel::FixedList { entries } => {
            for e in entries {
                if e.delay < 0.0 || !e.delay.is_finite() {
                    return Err(ScenarioError::Invalid(
                        "spawn delays must be non-negative".into(),
                    ));
                }
            }
        }
    }

    Ok(ResolvedConfig {
        environment: spec.environment.clone(),
        method: spec.method,
        planner: spec.planner,
        spawn: spec.spawn.clone(),
        seed: opts.seed_override.or(spec.seed).unwrap_or(0),
        gamma,
        robot_radius,
        comms_radius,
        target_speed,
        horizon,
        k_variables,
        t_internal,
        t_external,
        schedule: o.schedule.unwrap_or(Schedule::Interleaved),
        sigma_pose: positive(o.sigma_pose.unwrap_or(1e-15), "sigma_pose")?,
        sigma_dynamics: positive(o.sigma_dynamics.unwrap_or(0.1), "sigma_dynamics")?,
        sigma_interrobot: positive(o.sigma_interrobot.unwrap_or(0.005), "sigma_interrobot")?,
        sigma_obstacle: positive(o.sigma_obstacle.unwrap_or(0.005), "sigma_obstacle")?,
        sigma_tracking: positive(o.sigma_tracking.unwrap_or(0.15), "sigma_tracking")?,
        r_switch: positive(o.r_switch.unwrap_or(robot_radius), "r_switch")?,
        s_v: positive(o.s_v.unwrap_or(target_speed), "s_v")?,
        d_a: positive(o.d_a.unwrap_or(2.0 * robot_radius), "d_a")?,
        d_i: positive(o.d_i.unwrap_or(10.0), "d_i")?,
        d_o: positive(o.d_o.unwrap_or(robot_radius), "d_o")?,
        dt_sim,
        damping,
        sdf_cell: positive(o.sdf_cell.unwrap_or(crate::env::DEFAULT_SDF_CELL), "sdf_cell")?,
        duration,
        simplify: opts
            .simplify_override
            .or(spec.simplify)
            .unwrap_or(spec.method == Method::Wt),
        ppd_literal: opts.ppd_literal,
        rrt_step: positive(o.rrt_step.unwrap_or(2.0), "rrt_step")?,
        rrt_max_iters: o.rrt_max_iters.unwrap_or(10_000),
        rrt_goal_bias: o.rrt_goal_bias.unwrap_or(0.05),
        rrt_rewire_gamma: o.rrt_rewire_gamma,
    })
}

impl ResolvedConfig {
    pub fn robot_config(&self) -> RobotConfig {
        RobotConfig {
            radius: self.robot_radius,
            comms_radius: self.comms_radius,
            method: self.method,
            target_speed: self.target_speed,
            horizon: self.horizon,
            k_variables: self.k_variables,
            factors: FactorParams {
                sigma_pose: self.sigma_pose,
                sigma_dynamics: self.sigma_dynamics,
                sigma_interrobot: self.sigma_interrobot,
                sigma_obstacle: self.sigma_obstacle,
                sigma_tracking: self.sigma_tracking,
                d_i: self.d_i,
                d_o: self.d_o,
            },
            tracking: TrackingParams {
                r_switch: self.r_switch,
                s_v: self.s_v,
                d_a: self.d_a,
            },
            damping: self.damping,
        }
    }

    pub fn sim_params(&self) -> SimParams {
        SimParams {
            robot: self.robot_config(),
            dt_sim: self.dt_sim,
            t_internal: self.t_internal,
            t_external: self.t_external,
            schedule: self.schedule,
            gamma: self.gamma,
            seed: self.seed,
            duration: self.duration,
            planner: self.planner,
            rrt_step: self.rrt_step,
            rrt_max_iters: self.rrt_max_iters,
            rrt_goal_bias: self.rrt_goal_bias,
            rrt_rewire_gamma: self.rrt_rewire_gamma,
            simplify: self.simplify,
        }
    }
}

/// Pre-generates every spawn assignment for a run. Random models draw from
/// the spawn stream in robot-id order, so assignments depend only on the
/// seed, never on how the simulation unfolds.
pub fn generate_spawns(config: &ResolvedConfig) -> Vec<SpawnRequest> {
    match &config.spawn {
        SpawnModel::JunctionRandomSides { count, rate, sides } => {
            let mut rng = stream_rng(config.seed, STREAM_SPAWN);
            (0..*count)
                .map(|id| {
                    let side = rng.gen_range(0..sides.len());
                    let pick = rng.gen_range(0..sides.len() - 1);
                    let goal_side = if pick >= side { pick + 1 } else { pick };
                    SpawnRequest {
                        id,
                        time: id as f64 / rate,
                        start: Vec2::new(sides[side].spawn[0], sides[side].spawn[1]),
                        goal: Vec2::new(sides[goal_side].goal[0], sides[goal_side].goal[1]),
                    }
                })
                .collect()
        }
        SpawnModel::FixedList { entries } => entries
            .iter()
            .enumerate()
            .map(|(id, e)| SpawnRequest {
                id,
                time: e.delay,
                start: Vec2::new(e.start[0], e.start[1]),
                goal: Vec2::new(e.goal[0], e.goal[1]),
            })
            .collect(),
    }
}

/// A finished run: the record plus (optionally) the trajectory log.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub record: MetricsRecord,
    pub trajectories: Option<Vec<TrajectoryRow>>,
}

/// Runs one scenario to completion. `base_dir` anchors the environment path.
pub fn run_scenario(
    spec: &ScenarioSpec,
    base_dir: &Path,
    opts: &RunOptions,
) -> Result<ScenarioOutput, ScenarioError> {
    let config = resolve(spec, opts)?;
    let env = Environment::from_file(&base_dir.join(&config.environment), config.sdf_cell)?;
    let spawns = generate_spawns(&config);
    let mut world = World::new(env, config.sim_params(), spawns, opts.record_trajectories);
    world.run();
    let report = world.into_report(config.ppd_literal);

    let record = MetricsRecord {
        scenario: spec.name.clone(),
        seed: config.seed,
        gamma: config.gamma,
        method: config.method,
        planner: config.planner,
        inter_robot_collisions: report.inter_robot_collisions,
        environment_collisions: report.environment_collisions,
        ppd_rmse_mean: report.ppd_rmse_mean,
        ppd_rmse_std: report.ppd_rmse_std,
        spawned_robots: report.spawned,
        finished_robots: report.finished,
        faulted_robots: report.faulted,
        planning_failures: report.planning_failures,
        incomplete: report.incomplete,
        sim_steps: report.sim_steps,
        singular_updates: report.singular_updates,
        config,
        robots: report.robots,
    };
    Ok(ScenarioOutput {
        record,
        trajectories: report.trajectories,
    })
}

/// One cell of a failure sweep.
#[derive(Debug)]
pub struct SweepRun {
    pub gamma_index: usize,
    pub run_index: usize,
    pub gamma: f64,
    pub seed: u64,
    pub result: Result<MetricsRecord, String>,
}

/// Per-γ aggregate over the successful runs of that γ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaAggregate {
    pub gamma: f64,
    pub runs: usize,
    pub failed_runs: usize,
    pub inter_robot_mean: f64,
    pub inter_robot_std: f64,
    pub environment_mean: f64,
    pub environment_std: f64,
    pub ppd_mean: f64,
    pub ppd_std: f64,
}

pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    pub aggregates: Vec<GammaAggregate>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Runs `runs_per_gamma` seeded simulations for every γ in the list. Seeds
/// derive deterministically from (base seed, γ index, run index); individual
/// failures are recorded and the sweep continues.
pub fn failure_sweep(
    spec: &ScenarioSpec,
    base_dir: &Path,
    gammas: &[f64],
    runs_per_gamma: usize,
    opts: &RunOptions,
) -> Result<SweepResult, ScenarioError> {
    if gammas.is_empty() {
        return Err(ScenarioError::Invalid("gamma list is empty".into()));
    }
    if runs_per_gamma == 0 {
        return Err(ScenarioError::Invalid("runs per gamma must be positive".into()));
    }
    for &g in gammas {
        if !(0.0..=1.0).contains(&g) {
            return Err(ScenarioError::Invalid(format!(
                "gamma must be in [0, 1], got {g}"
            )));
        }
    }
    let base_seed = opts.seed_override.or(spec.seed).unwrap_or(0);

    let cells: Vec<(usize, usize)> = (0..gammas.len())
        .flat_map(|gi| (0..runs_per_gamma).map(move |ri| (gi, ri)))
        .collect();
    let runs: Vec<SweepRun> = cells
        .par_iter()
        .map(|&(gi, ri)| {
            let gamma = gammas[gi];
            let seed = derive_run_seed(base_seed, gi, ri);
            let mut cell_spec = spec.clone();
            cell_spec.overrides.gamma = Some(gamma);
            let cell_opts = RunOptions {
                seed_override: Some(seed),
                record_trajectories: false,
                ..*opts
            };
            let result = run_scenario(&cell_spec, base_dir, &cell_opts)
                .map(|out| out.record)
                .map_err(|e| e.to_string());
            SweepRun {
                gamma_index: gi,
                run_index: ri,
                gamma,
                seed,
                result,
            }
        })
        .collect();

    let aggregates = (0..gammas.len())
        .map(|gi| {
            let ok: Vec<&MetricsRecord> = runs
                .iter()
                .filter(|r| r.gamma_index == gi)
                .filter_map(|r| r.result.as_ref().ok())
                .collect();
            let failed = runs_per_gamma - ok.len();
            let collect = |f: &dyn Fn(&MetricsRecord) -> f64| -> Vec<f64> {
                ok.iter().map(|r| f(r)).collect()
            };
            let (ir_mean, ir_std) = mean_std(&collect(&|r| r.inter_robot_collisions as f64));
            let (env_mean, env_std) = mean_std(&collect(&|r| r.environment_collisions as f64));
            let (ppd_mean, ppd_std) = mean_std(&collect(&|r| r.ppd_rmse_mean));
            GammaAggregate {
                gamma: gammas[gi],
                runs: runs_per_gamma,
                failed_runs: failed,
                inter_robot_mean: ir_mean,
                inter_robot_std: ir_std,
                environment_mean: env_mean,
                environment_std: env_std,
                ppd_mean,
                ppd_std,
            }
        })
        .collect();

    Ok(SweepResult { runs, aggregates })
}

pub const AGGREGATE_CSV_HEADER: [&str; 9] = [
    "gamma",
    "runs",
    "failed_runs",
    "inter_robot_mean",
    "inter_robot_std",
    "environment_mean",
    "environment_std",
    "ppd_mean",
    "ppd_std",
];

/// Writes the per-γ aggregate table; float formatting round-trips exactly.
pub fn write_aggregates_csv<W: Write>(
    aggregates: &[GammaAggregate],
    out: W,
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGGREGATE_CSV_HEADER)?;
    for a in aggregates {
        w.write_record([
            a.gamma.to_string(),
            a.runs.to_string(),
            a.failed_runs.to_string(),
            a.inter_robot_mean.to_string(),
            a.inter_robot_std.to_string(),
            a.environment_mean.to_string(),
            a.environment_std.to_string(),
            a.ppd_mean.to_string(),
            a.ppd_std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a table written by [`write_aggregates_csv`].
pub fn read_aggregates_csv(text: &str) -> Result<Vec<GammaAggregate>, ScenarioError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| ScenarioError::Invalid(format!("bad csv row: {e}")))?;
        let field = |i: usize| -> Result<&str, ScenarioError> {
            row.get(i)
                .ok_or_else(|| ScenarioError::Invalid("missing csv column".into()))
        };
        let f = |i: usize| -> Result<f64, ScenarioError> {
            field(i)?
                .parse()
                .map_err(|e| ScenarioError::Invalid(format!("bad float: {e}")))
        };
        let u = |i: usize| -> Result<usize, ScenarioError> {
            field(i)?
                .parse()
                .map_err(|e| ScenarioError::Invalid(format!("bad count: {e}")))
        };
        out.push(GammaAggregate {
            gamma: f(0)?,
            runs: u(1)?,
            failed_runs: u(2)?,
            inter_robot_mean: f(3)?,
            inter_robot_std: f(4)?,
            environment_mean: f(5)?,
            environment_std: f(6)?,
            ppd_mean: f(7)?,
            ppd_std: f(8)?,
        });
    }
    Ok(out)
}
