//! Per-robot lifecycle: building the horizon factor graph from a planned path,
//! iterating it, integrating the pose, and advancing waypoint/segment targets.
//!
//! Two tracking modes share the same graph skeleton. In waypoint-tracking (WT)
//! the route influences the horizon only through the far anchor, which marches
//! toward the active waypoint. In path-tracking (PT) every interior horizon
//! variable additionally carries a tracking factor tied to the robot's current
//! path segment.

use crate::env::Environment;
use crate::factors::{self, FactorParams, TrackingContext, TrackingParams};
use crate::graph::{FactorGraph, FactorKind, GraphCtx};
use crate::planners::GlobalPath;
use crate::types::{RobotState, Vec2};
use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

/// How the route constrains the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Waypoint tracking: the horizon chases one waypoint at a time.
    Wt,
    /// Path tracking: tracking factors pull every horizon state onto the path.
    Pt,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Wt => "wt",
            Method::Pt => "pt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobotStatus {
    Active,
    Finished,
    /// A belief went non-finite; the robot is frozen in place and skipped.
    Faulted,
}

/// Per-robot configuration, fully resolved (no optional knobs).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RobotConfig {
    pub radius: f64,
    pub comms_radius: f64,
    pub method: Method,
    pub target_speed: f64,
    /// Planning horizon length t_{K−1} in seconds.
    pub horizon: f64,
    /// Number of horizon variables K (≥ 2).
    pub k_variables: usize,
    pub factors: FactorParams,
    pub tracking: TrackingParams,
    pub damping: f64,
}

impl RobotConfig {
    pub fn horizon_dt(&self) -> f64 {
        self.horizon / (self.k_variables - 1) as f64
    }
}

#[derive(Debug)]
pub struct Robot {
    id: usize,
    cfg: RobotConfig,
    pose: RobotState,
    pub(crate) graph: FactorGraph,
    path: GlobalPath,
    status: RobotStatus,
    /// Pose-anchor factor pinning variable 0 to the measured pose.
    start_anchor: usize,
    /// Pose-anchor factor pulling the horizon end along the route.
    end_anchor: usize,
    /// Current path segment (PT tracking index; also used to march the anchor).
    seg_index: usize,
    /// Index of the waypoint the WT horizon currently chases.
    waypoint_index: usize,
    /// Waypoints reached so far, in order (starts with the spawn waypoint 0).
    reached: Vec<usize>,
    /// Marching target the horizon-end anchor follows.
    anchor_point: Vec2,
    /// Arc-length position of the marching target (PT).
    anchor_arc: f64,
}

impl Robot {
    /// Builds the robot at the start of its path: K variables seeded along the
    /// straight line toward the first waypoint at the target speed, pose
    /// anchors at both ends, a dynamics chain, one obstacle factor per
    /// variable, and (PT only) tracking factors on the interior variables.
    pub fn spawn(id: usize, cfg: RobotConfig, path: GlobalPath) -> Self {
        assert!(cfg.k_variables >= 2, "need at least two horizon variables");
        let k = cfg.k_variables;
        let dt = cfg.horizon_dt();
        let start = path.waypoints()[0];
        let first_target = path.waypoints()[1];
        let to_target = first_target - start;
        let dir = if to_target.norm() > 1e-12 {
            to_target.normalize()
        } else {
            Vec2::zeros()
        };
        let vel = dir * cfg.target_speed;
        let pose = RobotState::new(start, vel);

        let mut graph = FactorGraph::new(cfg.damping);
        let vars: Vec<usize> = (0..k)
            .map(|i| {
                let t = i as f64 * dt;
                let state = RobotState::new(start + vel * t, vel);
                graph.add_variable(t, state.to_vector4())
            })
            .collect();

        let start_anchor = graph
            .add_factor(
                FactorKind::Pose { anchor: pose.to_vector4() },
                vec![vars[0]],
                cfg.factors.sigma_pose,
            )
            .expect("well-formed anchor");

        // The far anchor starts where the straight seed line leaves the route
        // (the first corner at most), so anchor and seeds agree at spawn and
        // the horizon settles without a violent compression or a corner-
        // cutting full-horizon chord. From there it marches along the path;
        // the arc gap self-adjusts toward v_t * horizon, where the robot's
        // pace matches the anchor's march.
        let lead = cfg.target_speed * cfg.horizon;
        let reach = lead.min(to_target.norm());
        let anchor_point = start + dir * reach;
        let anchor_arc = match cfg.method {
            Method::Pt => reach,
            Method::Wt => 0.0,
        };
        let end_anchor = graph
            .add_factor(
                FactorKind::Pose { anchor: Vector4::zeros() },
                vec![vars[k - 1]],
                cfg.factors.sigma_pose,
            )
            .expect("well-formed anchor");

        for i in 0..k - 1 {
            graph
                .add_factor(
                    FactorKind::Dynamics { dt },
                    vec![vars[i], vars[i + 1]],
                    cfg.factors.sigma_dynamics,
                )
                .expect("well-formed dynamics chain");
        }
        for &v in &vars {
            graph
                .add_factor(FactorKind::Obstacle, vec![v], cfg.factors.sigma_obstacle)
                .expect("well-formed obstacle factor");
        }
        if cfg.method == Method::Pt {
            for &v in &vars[1..k - 1] {
                graph
                    .add_factor(FactorKind::Tracking, vec![v], cfg.factors.sigma_tracking)
                    .expect("well-formed tracking factor");
            }
        }

        let mut robot = Self {
            id,
            cfg,
            pose,
            graph,
            path,
            status: RobotStatus::Active,
            start_anchor,
            end_anchor,
            seg_index: 0,
            waypoint_index: 1,
            reached: vec![0],
            anchor_point,
            anchor_arc,
        };
        robot.retarget_end_anchor();
        robot
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn config(&self) -> &RobotConfig {
        &self.cfg
    }

    pub fn pose(&self) -> RobotState {
        self.pose
    }

    pub fn status(&self) -> RobotStatus {
        self.status
    }

    pub fn is_active(&self) -> bool {
        self.status == RobotStatus::Active
    }

    pub fn path(&self) -> &GlobalPath {
        &self.path
    }

    /// Current tracking segment (PT) — also the marching anchor's segment.
    pub fn segment_index(&self) -> usize {
        self.seg_index
    }

    /// Waypoints reached so far, in order.
    pub fn reached_waypoints(&self) -> &[usize] {
        &self.reached
    }

    /// One synchronous internal round (all factors, then all variables).
    pub fn internal_round(&mut self, env: &Environment) {
        let ctx = GraphCtx {
            sdf: Some(&env.sdf),
            d_o: self.cfg.factors.d_o,
            tracking: match self.cfg.method {
                Method::Pt => Some(
                    TrackingContext::new(&self.path, self.seg_index, self.cfg.tracking)
                        .expect("segment index maintained in range"),
                ),
                Method::Wt => None,
            },
        };
        self.graph.iterate_internal(1, &ctx);
    }

    /// Variable sweep only — run after external messages are delivered.
    pub fn variable_sweep(&mut self) {
        for v in 0..self.graph.num_variables() {
            self.graph.variable_update(v);
        }
    }

    /// Advances the simulated pose by `dt_sim` along the believed short-term
    /// plan, re-anchors variable 0, updates waypoint/segment targets, and
    /// marches the horizon-end anchor. A collapsed belief (non-finite mean,
    /// or an information matrix that lost positive-definiteness after the
    /// graph has formed) faults the robot rather than silently stalling it.
    pub fn step(&mut self, dt_sim: f64) {
        if self.status != RobotStatus::Active {
            return;
        }
        let belief = self.graph.variable(1).belief();
        let next = match belief.mean() {
            Some(m) if m.iter().all(|v| v.is_finite()) => m,
            Some(_) => {
                self.status = RobotStatus::Faulted;
                return;
            }
            None => {
                if belief.is_vacuous() {
                    // No messages have arrived yet; hold position.
                    return;
                }
                self.status = RobotStatus::Faulted;
                return;
            }
        };
        let alpha = dt_sim / self.cfg.horizon_dt();
        let target = RobotState::new(Vec2::new(next[0], next[1]), Vec2::new(next[2], next[3]));
        let new_pose = RobotState::new(
            self.pose.pos + (target.pos - self.pose.pos) * alpha,
            self.pose.vel + (target.vel - self.pose.vel) * alpha,
        );
        if !new_pose.is_finite() {
            self.status = RobotStatus::Faulted;
            return;
        }
        self.pose = new_pose;
        self.graph
            .set_anchor(self.start_anchor, self.pose.to_vector4())
            .expect("start anchor is a pose factor");

        match self.cfg.method {
            Method::Wt => self.advance_waypoint(),
            Method::Pt => {
                let ctx = TrackingContext::new(&self.path, self.seg_index, self.cfg.tracking)
                    .expect("segment index maintained in range");
                self.seg_index = factors::advance_segment(self.pose.pos, &ctx);
            }
        }
        self.march_anchor(dt_sim);
        self.retarget_end_anchor();

        let goal = *self.path.waypoints().last().unwrap();
        if (self.pose.pos - goal).norm() < self.cfg.tracking.r_switch {
            let final_idx = self.path.len() - 1;
            if self.reached.last() != Some(&final_idx) {
                self.reached.push(final_idx);
            }
            self.status = RobotStatus::Finished;
        }
    }

    /// WT rule: advance to the next waypoint once the horizon-end belief mean
    /// enters the switch radius of the current one (at most one per step).
    fn advance_waypoint(&mut self) {
        let n = self.path.len();
        if self.waypoint_index >= n - 1 {
            return; // already chasing the final waypoint
        }
        let end_var = self.graph.variable(self.cfg.k_variables - 1);
        let mean = match end_var.belief().mean() {
            Some(m) => Vec2::new(m[0], m[1]),
            None => return,
        };
        let target = self.path.waypoints()[self.waypoint_index];
        if (mean - target).norm() < self.cfg.tracking.r_switch {
            self.reached.push(self.waypoint_index);
            self.waypoint_index += 1;
        }
    }

    /// Moves the horizon-end target along the route at the target speed,
    /// pausing while it is more than one horizon ahead of the robot so a
    /// blocked robot's goal never runs away.
    fn march_anchor(&mut self, dt_sim: f64) {
        let lead_cap = self.cfg.target_speed * self.cfg.horizon;
        if (self.anchor_point - self.pose.pos).norm() > lead_cap {
            return;
        }
        let advance = self.cfg.target_speed * dt_sim;
        match self.cfg.method {
            Method::Pt => {
                // March up to twice as fast while the along-path gap is below
                // the full lead, so the horizon stretches out quickly after
                // spawn without ever overshooting the steady-state gap.
                let robot_arc = self.path.arc_of_projection(self.seg_index, self.pose.pos);
                let gap = (self.anchor_arc - robot_arc).max(0.0);
                let catch_up = (1.0 - gap / lead_cap).clamp(0.0, 1.0);
                self.anchor_arc =
                    (self.anchor_arc + advance * (1.0 + catch_up)).min(self.path.total_length());
                self.anchor_point = self.path.point_at_arc(self.anchor_arc);
            }
            Method::Wt => {
                let target = self.path.waypoints()[self.waypoint_index];
                let to_target = target - self.anchor_point;
                let dist = to_target.norm();
                if dist <= advance {
                    self.anchor_point = target;
                } else {
                    self.anchor_point += to_target * (advance / dist);
                }
            }
        }
    }

    /// Writes the marching target (position + route-aligned velocity, zero at
    /// the route end) into the horizon-end anchor factor.
    fn retarget_end_anchor(&mut self) {
        let v = self.anchor_velocity();
        let anchor = Vector4::new(self.anchor_point.x, self.anchor_point.y, v.x, v.y);
        self.graph
            .set_anchor(self.end_anchor, anchor)
            .expect("end anchor is a pose factor");
    }

    fn anchor_velocity(&self) -> Vec2 {
        let eps = 1e-9;
        match self.cfg.method {
            Method::Pt => {
                if self.anchor_arc >= self.path.total_length() - eps {
                    Vec2::zeros()
                } else {
                    // Sampled a hair behind the arc so that exactly at a
                    // corner the velocity keeps the incoming leg's direction:
                    // the anchor is the far end of a train arriving from
                    // behind, and at spawn (anchor at the first corner) it
                    // must agree with the straight seed line.
                    let arc = (self.anchor_arc - eps).max(0.0);
                    self.path.direction_at_arc(arc) * self.cfg.target_speed
                }
            }
            Method::Wt => {
                let target = self.path.waypoints()[self.waypoint_index];
                let to_target = target - self.anchor_point;
                if to_target.norm() > eps {
                    to_target.normalize() * self.cfg.target_speed
                } else if self.waypoint_index == self.path.len() - 1 {
                    Vec2::zeros()
                } else {
                    // Waiting at a corner: pre-turn toward the next leg.
                    let next = self.path.waypoints()[self.waypoint_index + 1];
                    (next - target).normalize() * self.cfg.target_speed
                }
            }
        }
    }
}
