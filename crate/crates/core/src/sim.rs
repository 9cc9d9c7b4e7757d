//! The synchronous world loop.
//!
//! Every simulation timestep runs three barrier-separated phases:
//! 1. spawn + discovery: due robots are placed (deferred while their spawn
//!    point is occupied), neighbor pairs are found, and per-robot offline
//!    draws are made;
//! 2. inference: internal GBP rounds (each robot's own graph, in parallel)
//!    and external rounds (inter-robot link messages computed from a frozen
//!    snapshot, then applied in one deterministic batch);
//! 3. integration + metrics: poses advance in parallel, then collisions and
//!    tracking error are sampled single-threaded.
//!
//! No phase reads state another thread is writing, so results are identical
//! for any worker count.

use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comms::{apply_link_messages, compute_link_messages, neighbor_pairs, CommsChannel};
use crate::env::Environment;
use crate::metrics::{
    aggregate_rmse, perpendicular_distance, rmse_literal_of, rmse_of, Body, CollisionTracker,
    RobotMetrics,
};
use crate::planners::{
    astar_lanes, rrt_star, simplify_path, GlobalPath, PlanError, PlannerChoice, RrtParams,
};
use crate::robot::{Robot, RobotConfig, RobotStatus};
use crate::rng::derive_robot_seed;
use crate::types::Vec2;

/// How internal and external message rounds are ordered within a timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Alternate one internal and one external round (default).
    Interleaved,
    /// All internal rounds first, then all external rounds.
    Sequential,
}

/// Everything the world loop needs, fully resolved.
#[derive(Debug, Clone)]
pub struct SimParams {
    pub robot: RobotConfig,
    pub dt_sim: f64,
    pub t_internal: usize,
    pub t_external: usize,
    pub schedule: Schedule,
    pub gamma: f64,
    pub seed: u64,
    /// Wall-clock cap in simulated seconds.
    pub duration: f64,
    pub planner: PlannerChoice,
    pub rrt_step: f64,
    pub rrt_max_iters: usize,
    pub rrt_goal_bias: f64,
    pub rrt_rewire_gamma: Option<f64>,
    /// Post-process planned paths by removing redundant waypoints.
    pub simplify: bool,
}

/// One robot to create: where, where to, and when.
#[derive(Debug, Clone, Copy)]
pub struct SpawnRequest {
    pub id: usize,
    pub time: f64,
    pub start: Vec2,
    pub goal: Vec2,
}

/// One row of the trajectory log: pose of one robot after one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub robot_id: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Default)]
struct Outcome {
    samples: Vec<f64>,
    planning_failed: bool,
}

/// Result of a completed world run, before scenario metadata is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldReport {
    pub robots: Vec<RobotMetrics>,
    pub inter_robot_collisions: u64,
    pub environment_collisions: u64,
    pub ppd_rmse_mean: f64,
    pub ppd_rmse_std: f64,
    pub spawned: usize,
    pub finished: usize,
    pub faulted: usize,
    pub planning_failures: usize,
    /// True when the duration cap elapsed with robots still unfinished, or a
    /// robot faulted, or spawns never got placed.
    pub incomplete: bool,
    pub sim_steps: u64,
    pub singular_updates: u64,
    pub trajectories: Option<Vec<TrajectoryRow>>,
}

pub struct World {
    env: Environment,
    params: SimParams,
    pending: VecDeque<SpawnRequest>,
    /// Paths planned for not-yet-placed robots (planning happens once).
    planned: HashMap<usize, GlobalPath>,
    robots: Vec<Robot>,
    outcomes: HashMap<usize, Outcome>,
    channel: CommsChannel,
    tracker: CollisionTracker,
    time: f64,
    steps: u64,
    singular_external: u64,
    trajectories: Option<Vec<TrajectoryRow>>,
}

impl World {
    /// `spawns` may arrive in any order; they are processed by (time, id).
    pub fn new(
        env: Environment,
        params: SimParams,
        mut spawns: Vec<SpawnRequest>,
        record_trajectories: bool,
    ) -> Self {
        spawns.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.id.cmp(&b.id)));
        let outcomes = spawns
            .iter()
            .map(|s| (s.id, Outcome::default()))
            .collect();
        let channel = CommsChannel::new(params.seed, params.gamma);
        Self {
            env,
            params,
            pending: spawns.into(),
            planned: HashMap::new(),
            robots: Vec::new(),
            outcomes,
            channel,
            tracker: CollisionTracker::new(),
            time: 0.0,
            steps: 0,
            singular_external: 0,
            trajectories: record_trajectories.then(Vec::new),
        }
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn robots(&self) -> &[Robot] {
        &self.robots
    }

    /// True once nothing is pending and no robot is still active.
    pub fn is_complete(&self) -> bool {
        self.pending.is_empty() && self.robots.iter().all(|r| !r.is_active())
    }

    fn plan(&mut self, req: &SpawnRequest) -> Result<GlobalPath, PlanError> {
        let radius = self.params.robot.radius;
        let path = match self.params.planner {
            PlannerChoice::RrtStar => {
                let rrt = RrtParams {
                    step: self.params.rrt_step,
                    max_iters: self.params.rrt_max_iters,
                    goal_bias: self.params.rrt_goal_bias,
                    rewire_gamma: self.params.rrt_rewire_gamma,
                    seed: derive_robot_seed(self.params.seed, req.id),
                };
                rrt_star(&self.env, req.start, req.goal, radius, &rrt)?
            }
            PlannerChoice::Structured => astar_lanes(&self.env, req.start, req.goal)?,
        };
        if self.params.simplify {
            Ok(simplify_path(&path, &self.env, radius))
        } else {
            Ok(path)
        }
    }

    /// Places every due request whose spawn point is free; occupied spawns
    /// stay queued for the next step. Planning failures drop the request and
    /// are recorded.
    fn try_spawns(&mut self) {
        let due: Vec<SpawnRequest> = {
            let mut due = Vec::new();
            let mut rest = VecDeque::new();
            while let Some(req) = self.pending.pop_front() {
                if req.time <= self.time + 1e-9 {
                    due.push(req);
                } else {
                    rest.push_back(req);
                }
            }
            self.pending = rest;
            due
        };

        for req in due {
            let path = match self.planned.remove(&req.id) {
                Some(p) => p,
                None => match self.plan(&req) {
                    Ok(p) => p,
                    Err(_) => {
                        self.outcomes.get_mut(&req.id).unwrap().planning_failed = true;
                        continue;
                    }
                },
            };
            let occupied = self.robots.iter().any(|r| {
                r.status() != RobotStatus::Finished
                    && (r.pose().pos - req.start).norm()
                        < r.config().radius + self.params.robot.radius
            });
            if occupied {
                self.planned.insert(req.id, path);
                self.pending.push_front(req);
                continue;
            }
            self.robots
                .push(Robot::spawn(req.id, self.params.robot, path));
        }
        // Keep deferred requests ahead of later arrivals.
        self.pending
            .make_contiguous()
            .sort_by(|a, b| a.time.total_cmp(&b.time).then(a.id.cmp(&b.id)));
    }

    fn internal_round(&mut self) {
        let env = &self.env;
        self.robots.par_iter_mut().for_each(|r| {
            if r.is_active() {
                r.internal_round(env);
            }
        });
    }

    fn external_round(&mut self, live_pairs: &[(usize, usize)]) {
        let batch = compute_link_messages(&self.robots, live_pairs);
        self.singular_external += apply_link_messages(&mut self.robots, batch);
        self.robots.par_iter_mut().for_each(|r| {
            if r.is_active() {
                r.variable_sweep();
            }
        });
    }

    /// Advances the world by one `dt_sim`.
    pub fn step(&mut self) {
        self.try_spawns();

        for r in &mut self.robots {
            r.graph.clear_externals();
        }
        let pairs = neighbor_pairs(&self.robots);
        let n_active = self.robots.iter().filter(|r| r.is_active()).count();
        let draws = self.channel.draw_offline(n_active);
        let mut offline = vec![false; self.robots.len()];
        let mut it = draws.into_iter();
        for (i, r) in self.robots.iter().enumerate() {
            if r.is_active() {
                offline[i] = it.next().expect("one draw per active robot");
            }
        }
        let live: Vec<(usize, usize)> = pairs
            .into_iter()
            .filter(|&(a, b)| !offline[a] && !offline[b])
            .collect();

        match self.params.schedule {
            Schedule::Interleaved => {
                let rounds = self.params.t_internal.max(self.params.t_external);
                for i in 0..rounds {
                    if i < self.params.t_internal {
                        self.internal_round();
                    }
                    if i < self.params.t_external {
                        self.external_round(&live);
                    }
                }
            }
            Schedule::Sequential => {
                for _ in 0..self.params.t_internal {
                    self.internal_round();
                }
                for _ in 0..self.params.t_external {
                    self.external_round(&live);
                }
            }
        }

        let dt = self.params.dt_sim;
        self.robots.par_iter_mut().for_each(|r| r.step(dt));
        self.time += dt;
        self.steps += 1;

        // Metrics pass (single-threaded): collisions over every body still in
        // the world, tracking samples for robots still driving.
        let bodies: Vec<Body> = self
            .robots
            .iter()
            .filter(|r| r.status() != RobotStatus::Finished)
            .map(|r| Body {
                id: r.id(),
                pos: r.pose().pos,
                radius: r.config().radius,
            })
            .collect();
        self.tracker.update(&bodies, &self.env);
        for r in &self.robots {
            if r.is_active() {
                let d = perpendicular_distance(r.pose().pos, r.path());
                self.outcomes.get_mut(&r.id()).unwrap().samples.push(d);
            }
        }
        if let Some(rows) = &mut self.trajectories {
            for r in &self.robots {
                if r.status() != RobotStatus::Finished {
                    rows.push(TrajectoryRow {
                        t: self.time,
                        robot_id: r.id(),
                        x: r.pose().pos.x,
                        y: r.pose().pos.y,
                    });
                }
            }
        }
    }

    /// Runs to completion or the duration cap, whichever first.
    pub fn run(&mut self) {
        while !self.is_complete() && self.time < self.params.duration - 1e-9 {
            self.step();
        }
    }

    /// Consumes the world into per-robot metrics and totals. `literal_rmse`
    /// selects the fourth-power aggregation variant.
    pub fn into_report(self, literal_rmse: bool) -> WorldReport {
        let by_id: HashMap<usize, &Robot> = self.robots.iter().map(|r| (r.id(), r)).collect();
        let mut ids: Vec<usize> = self.outcomes.keys().copied().collect();
        ids.sort_unstable();

        let robots: Vec<RobotMetrics> = ids
            .iter()
            .map(|id| {
                let outcome = &self.outcomes[id];
                let robot = by_id.get(id);
                let rmse = if outcome.samples.is_empty() {
                    None
                } else if literal_rmse {
                    rmse_literal_of(&outcome.samples).ok()
                } else {
                    rmse_of(&outcome.samples).ok()
                };
                RobotMetrics {
                    id: *id,
                    finished: robot.is_some_and(|r| r.status() == RobotStatus::Finished),
                    faulted: robot.is_some_and(|r| r.status() == RobotStatus::Faulted),
                    planning_failed: outcome.planning_failed,
                    ppd_rmse: rmse,
                    ppd_samples: outcome.samples.clone(),
                }
            })
            .collect();

        let (mean, std) = aggregate_rmse(&robots);
        let finished = robots.iter().filter(|r| r.finished).count();
        let faulted = robots.iter().filter(|r| r.faulted).count();
        let planning_failures = robots.iter().filter(|r| r.planning_failed).count();
        let incomplete = !self.pending.is_empty()
            || self.robots.iter().any(|r| r.is_active())
            || faulted > 0;
        let singular_updates = self.singular_external
            + self
                .robots
                .iter()
                .map(|r| r.graph.singular_updates())
                .sum::<u64>();

        WorldReport {
            spawned: self.robots.len(),
            robots,
            inter_robot_collisions: self.tracker.inter_robot(),
            environment_collisions: self.tracker.environment(),
            ppd_rmse_mean: mean,
            ppd_rmse_std: std,
            finished,
            faulted,
            planning_failures,
            incomplete,
            sim_steps: self.steps,
            singular_updates,
            trajectories: self.trajectories,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Bounds, LaneGraph};
    use crate::factors::{FactorParams, TrackingParams};
    use crate::robot::Method;

    fn test_bounds() -> Bounds {
        Bounds {
            min: Vec2::new(-20.0, -40.0),
            max: Vec2::new(80.0, 40.0),
        }
    }

    fn free_env() -> Environment {
        Environment::new(test_bounds(), vec![], None, 0.5).unwrap()
    }

    /// Obstacle-free environment with a directed lane graph, so structured
    /// plans are exact node-to-node polylines.
    fn lane_env(nodes: Vec<Vec2>, edges: &[(usize, usize)]) -> Environment {
        let lanes = LaneGraph::from_parts(nodes, edges).unwrap();
        Environment::new(test_bounds(), vec![], Some(lanes), 0.5).unwrap()
    }

    fn params(method: Method, seed: u64, gamma: f64) -> SimParams {
        SimParams {
            robot: RobotConfig {
                radius: 2.0,
                comms_radius: 20.0,
                method,
                target_speed: 5.0,
                horizon: 5.0,
                k_variables: 10,
                factors: FactorParams::for_radius(2.0),
                tracking: TrackingParams::for_robot(2.0, 5.0),
                damping: 0.0,
            },
            dt_sim: 0.1,
            t_internal: 10,
            t_external: 10,
            schedule: Schedule::Interleaved,
            gamma,
            seed,
            duration: 300.0,
            planner: PlannerChoice::RrtStar,
            rrt_step: 2.0,
            rrt_max_iters: 4000,
            rrt_goal_bias: 0.05,
            rrt_rewire_gamma: None,
            simplify: method == Method::Wt,
        }
    }

    #[test]
    fn empty_world_completes_immediately() {
        let mut world = World::new(free_env(), params(Method::Pt, 1, 0.0), vec![], false);
        assert!(world.is_complete());
        world.run();
        let report = world.into_report(false);
        assert_eq!(report.sim_steps, 0);
        assert_eq!(report.inter_robot_collisions, 0);
        assert_eq!(report.environment_collisions, 0);
        assert!(report.robots.is_empty());
        assert!(!report.incomplete);
        assert_eq!((report.ppd_rmse_mean, report.ppd_rmse_std), (0.0, 0.0));
    }

    #[test]
    fn solo_straight_lane_tracks_its_path_tightly() {
        // A single straight lane: the planned path is exactly trackable, so
        // path deviation should stay far below the tracking tolerance.
        let env = lane_env(vec![Vec2::new(0.0, 0.0), Vec2::new(50.0, 0.0)], &[(0, 1)]);
        let spawns = vec![SpawnRequest {
            id: 0,
            time: 0.0,
            start: Vec2::new(0.0, 0.0),
            goal: Vec2::new(50.0, 0.0),
        }];
        let mut p = params(Method::Pt, 3, 0.0);
        p.planner = PlannerChoice::Structured;
        let mut world = World::new(env, p, spawns, false);
        world.run();
        let report = world.into_report(false);
        assert!(!report.incomplete, "solo run should finish");
        assert_eq!(report.finished, 1);
        assert!(
            report.ppd_rmse_mean < 0.1,
            "solo straight-lane RMSE {} ≥ 0.1 m",
            report.ppd_rmse_mean
        );
        assert_eq!(report.inter_robot_collisions, 0);
        assert_eq!(report.environment_collisions, 0);
    }

    #[test]
    fn head_on_pair_crosses_without_collision() {
        // Opposing lanes 1.5 m apart: with 2 m robot radii an unmitigated
        // pass would overlap by 2.5 m, so finishing clean requires a dodge.
        let env = lane_env(
            vec![
                Vec2::new(0.0, 0.0),
                Vec2::new(50.0, 0.0),
                Vec2::new(50.0, 1.5),
                Vec2::new(0.0, 1.5),
            ],
            &[(0, 1), (2, 3), (1, 2), (3, 0)],
        );
        let spawns = vec![
            SpawnRequest {
                id: 0,
                time: 0.0,
                start: Vec2::new(0.0, 0.0),
                goal: Vec2::new(50.0, 0.0),
            },
            SpawnRequest {
                id: 1,
                time: 0.0,
                start: Vec2::new(50.0, 1.5),
                goal: Vec2::new(0.0, 1.5),
            },
        ];
        let mut p = params(Method::Pt, 5, 0.0);
        p.planner = PlannerChoice::Structured;
        let mut world = World::new(env, p, spawns, false);
        world.run();
        let report = world.into_report(false);
        assert_eq!(report.finished, 2, "both robots should finish");
        assert_eq!(
            report.inter_robot_collisions, 0,
            "head-on robots should avoid each other"
        );
    }

    #[test]
    fn occupied_spawn_defers_until_free() {
        let spawns = vec![
            SpawnRequest {
                id: 0,
                time: 0.0,
                start: Vec2::new(0.0, 0.0),
                goal: Vec2::new(50.0, 0.0),
            },
            SpawnRequest {
                id: 1,
                time: 0.0,
                start: Vec2::new(0.0, 0.0),
                goal: Vec2::new(50.0, 10.0),
            },
        ];
        let mut world = World::new(free_env(), params(Method::Pt, 7, 0.0), spawns, true);
        world.run();
        let report = world.into_report(false);
        assert_eq!(report.spawned, 2, "deferred robot must still spawn");
        let rows = report.trajectories.unwrap();
        let first = |id: usize| {
            rows.iter()
                .filter(|r| r.robot_id == id)
                .map(|r| r.t)
                .fold(f64::INFINITY, f64::min)
        };
        assert!(
            first(1) > first(0) + 0.5,
            "robot 1 should appear only after robot 0 clears the pad"
        );
    }

    #[test]
    fn full_comm_failure_reduces_to_solo_behavior() {
        let solo = vec![SpawnRequest {
            id: 0,
            time: 0.0,
            start: Vec2::new(0.0, 0.0),
            goal: Vec2::new(50.0, 0.0),
        }];
        let duo = vec![
            solo[0],
            SpawnRequest {
                id: 1,
                time: 0.0,
                start: Vec2::new(0.0, 10.0),
                goal: Vec2::new(50.0, 10.0),
            },
        ];
        let mut world_solo = World::new(free_env(), params(Method::Pt, 11, 1.0), solo, true);
        world_solo.run();
        let mut world_duo = World::new(free_env(), params(Method::Pt, 11, 1.0), duo, true);
        world_duo.run();

        let rows_solo = world_solo.into_report(false).trajectories.unwrap();
        let rows_duo = world_duo.into_report(false).trajectories.unwrap();
        let track = |rows: &[TrajectoryRow], id: usize| -> Vec<(f64, f64, f64)> {
            rows.iter()
                .filter(|r| r.robot_id == id)
                .map(|r| (r.t, r.x, r.y))
                .collect()
        };
        assert_eq!(
            track(&rows_solo, 0),
            track(&rows_duo, 0),
            "with all links down, a neighbor must not perturb the trajectory"
        );
    }

    #[test]
    fn reports_are_thread_count_invariant() {
        let spawns: Vec<SpawnRequest> = (0..4)
            .map(|i| SpawnRequest {
                id: i,
                time: 0.2 * i as f64,
                start: Vec2::new(0.0, -15.0 + 10.0 * i as f64),
                goal: Vec2::new(50.0, 15.0 - 10.0 * i as f64),
            })
            .collect();
        let run_with = |threads: usize| -> WorldReport {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let mut world =
                    World::new(free_env(), params(Method::Pt, 13, 0.2), spawns.clone(), true);
                world.run();
                world.into_report(false)
            })
        };
        let single = run_with(1);
        let multi = run_with(8);
        assert_eq!(single, multi);
    }
}
