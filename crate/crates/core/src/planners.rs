//! Global planners: sampling-based RRT* for unstructured maps and A* over the
//! directed lane graph for structured ones, plus greedy path shortcutting.
//!
//! Planners are pure functions of (environment, seed) and therefore safe to run
//! per robot in parallel. Outputs are `GlobalPath` polylines whose segments
//! clear obstacles by at least the robot radius.

use crate::env::Environment;
use crate::rng::{stream_rng, STREAM_PLANNER_BASE};
use crate::types::Vec2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("planning failed: {0}")]
    PlanningFailed(String),
    #[error("invalid path: {0}")]
    InvalidPath(String),
}

/// Which global planner a scenario routes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerChoice {
    /// Sampling-based planner over free space.
    RrtStar,
    /// A* over the environment's directed lane graph.
    Structured,
}

impl PlannerChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlannerChoice::RrtStar => "rrt_star",
            PlannerChoice::Structured => "structured",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathSource {
    RrtStar,
    Structured,
    Manual,
}

/// Polyline a robot is asked to follow: at least two waypoints, consecutive
/// waypoints distinct, planner-produced segments obstacle-free with margin.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPath {
    waypoints: Vec<Vec2>,
    cumulative: Vec<f64>,
    source: PathSource,
}

impl GlobalPath {
    pub fn new(waypoints: Vec<Vec2>, source: PathSource) -> Result<Self, PlanError> {
        if waypoints.len() < 2 {
            return Err(PlanError::InvalidPath("need at least 2 waypoints".into()));
        }
        if waypoints.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(PlanError::InvalidPath("non-finite waypoint".into()));
        }
        let mut cumulative = Vec::with_capacity(waypoints.len());
        cumulative.push(0.0);
        for w in waypoints.windows(2) {
            let d = (w[1] - w[0]).norm();
            if d <= 1e-9 {
                return Err(PlanError::InvalidPath(
                    "consecutive waypoints must be distinct".into(),
                ));
            }
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Ok(Self {
            waypoints,
            cumulative,
            source,
        })
    }

    pub fn waypoints(&self) -> &[Vec2] {
        &self.waypoints
    }

    pub fn source(&self) -> PathSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees ≥ 2 waypoints
    }

    pub fn total_length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Point at arc length `s` from the start, clamped to the path.
    pub fn point_at_arc(&self, s: f64) -> Vec2 {
        let (i, t) = self.locate_arc(s);
        let a = self.waypoints[i];
        let b = self.waypoints[i + 1];
        a + (b - a) * t
    }

    /// Unit tangent of the segment containing arc length `s`.
    pub fn direction_at_arc(&self, s: f64) -> Vec2 {
        let (i, _) = self.locate_arc(s);
        (self.waypoints[i + 1] - self.waypoints[i]).normalize()
    }

    /// Arc-length coordinate of `p` projected onto segment `i`, clamped to
    /// that segment. Converts a tracked segment index plus a world position
    /// into distance along the route.
    pub fn arc_of_projection(&self, seg: usize, p: Vec2) -> f64 {
        let i = seg.min(self.waypoints.len() - 2);
        let a = self.waypoints[i];
        let b = self.waypoints[i + 1];
        let ab = b - a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 {
            ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        self.cumulative[i] + t * (self.cumulative[i + 1] - self.cumulative[i])
    }

    /// Segment index and fractional position for arc length `s` (clamped).
    fn locate_arc(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.total_length());
        // Last segment containing s; joints resolve to the later segment.
        let mut i = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(k) => k,
            Err(k) => k - 1,
        };
        i = i.min(self.waypoints.len() - 2);
        let seg_len = self.cumulative[i + 1] - self.cumulative[i];
        ((i), ((s - self.cumulative[i]) / seg_len).clamp(0.0, 1.0))
    }

    /// True when every segment keeps at least `radius` clearance from obstacles.
    pub fn clears(&self, env: &Environment, radius: f64) -> bool {
        self.waypoints
            .windows(2)
            .all(|w| env.segment_clearance(w[0], w[1]) >= radius)
    }
}

// ---------------------------------------------------------------------------
// RRT*
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct RrtParams {
    /// Maximum extension length per tree edge (m).
    pub step: f64,
    /// Number of sampling iterations.
    pub max_iters: usize,
    /// Probability of sampling the goal instead of a uniform point.
    pub goal_bias: f64,
    /// Coefficient of the shrinking rewire radius γ·sqrt(ln n / n), capped at
    /// `step`. None picks 2·sqrt(sampling area), which keeps the radius above
    /// the optimality threshold for the whole run.
    pub rewire_gamma: Option<f64>,
    /// Seed for the sampling stream; fixed seed gives identical output.
    pub seed: u64,
}

impl RrtParams {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            step: 2.0,
            max_iters: 10_000,
            goal_bias: 0.05,
            rewire_gamma: None,
            seed,
        }
    }
}

struct RrtNode {
    pos: Vec2,
    parent: usize,
    cost: f64,
}

/// Uniform-grid point index for nearest-node and radius queries.
struct PointGrid {
    min: Vec2,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl PointGrid {
    fn new(min: Vec2, max: Vec2, cell: f64) -> Self {
        let nx = ((max.x - min.x) / cell).ceil().max(1.0) as usize;
        let ny = ((max.y - min.y) / cell).ceil().max(1.0) as usize;
        Self {
            min,
            cell,
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
        }
    }

    fn cell_of(&self, p: Vec2) -> (usize, usize) {
        let i = (((p.x - self.min.x) / self.cell).floor() as isize).clamp(0, self.nx as isize - 1);
        let j = (((p.y - self.min.y) / self.cell).floor() as isize).clamp(0, self.ny as isize - 1);
        (i as usize, j as usize)
    }

    fn insert(&mut self, idx: usize, p: Vec2) {
        let (i, j) = self.cell_of(p);
        self.buckets[j * self.nx + i].push(idx);
    }

    /// Index of the closest stored point (ties broken by smaller index).
    fn nearest(&self, nodes: &[RrtNode], p: Vec2) -> usize {
        let (ci, cj) = self.cell_of(p);
        let max_ring = self.nx.max(self.ny);
        let mut best = (f64::INFINITY, usize::MAX);
        for ring in 0..=max_ring {
            // Any point in a farther ring is at least (ring − 1) cells away.
            if best.1 != usize::MAX && (ring as f64 - 1.0) * self.cell > best.0 {
                break;
            }
            self.for_ring(ci, cj, ring, |bucket| {
                for &idx in bucket {
                    let d = (nodes[idx].pos - p).norm();
                    if d < best.0 || (d == best.0 && idx < best.1) {
                        best = (d, idx);
                    }
                }
            });
        }
        best.1
    }

    /// Indices of stored points within `radius` of `p`, sorted ascending.
    fn in_radius(&self, nodes: &[RrtNode], p: Vec2, radius: f64) -> Vec<usize> {
        let (i0, j0) = self.cell_of(p - Vec2::new(radius, radius));
        let (i1, j1) = self.cell_of(p + Vec2::new(radius, radius));
        let mut out = Vec::new();
        for j in j0..=j1 {
            for i in i0..=i1 {
                for &idx in &self.buckets[j * self.nx + i] {
                    if (nodes[idx].pos - p).norm() <= radius {
                        out.push(idx);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn for_ring(&self, ci: usize, cj: usize, ring: usize, mut f: impl FnMut(&[usize])) {
        let r = ring as isize;
        let (ci, cj) = (ci as isize, cj as isize);
        let visit = |i: isize, j: isize, f: &mut dyn FnMut(&[usize])| {
            if i >= 0 && j >= 0 && (i as usize) < self.nx && (j as usize) < self.ny {
                f(&self.buckets[j as usize * self.nx + i as usize]);
            }
        };
        if ring == 0 {
            visit(ci, cj, &mut f);
            return;
        }
        for i in (ci - r)..=(ci + r) {
            visit(i, cj - r, &mut f);
            visit(i, cj + r, &mut f);
        }
        for j in (cj - r + 1)..(cj + r) {
            visit(ci - r, j, &mut f);
            visit(ci + r, j, &mut f);
        }
    }
}

/// Asymptotically optimal sampling planner. Deterministic for a fixed seed, and
/// the extra samples of a larger `max_iters` run extend the same stream, so the
/// returned path length is non-increasing in `max_iters`.
pub fn rrt_star(
    env: &Environment,
    start: Vec2,
    goal: Vec2,
    clearance: f64,
    params: &RrtParams,
) -> Result<GlobalPath, PlanError> {
    let lo = env.bounds.min + Vec2::new(clearance, clearance);
    let hi = env.bounds.max - Vec2::new(clearance, clearance);
    if lo.x >= hi.x || lo.y >= hi.y {
        return Err(PlanError::PlanningFailed(
            "bounds too small for the requested clearance".into(),
        ));
    }
    let point_free = |p: Vec2| {
        p.x >= lo.x
            && p.x <= hi.x
            && p.y >= lo.y
            && p.y <= hi.y
            && env.signed_distance(p) >= clearance
    };
    if !point_free(start) {
        return Err(PlanError::PlanningFailed("start is not collision-free".into()));
    }
    if !point_free(goal) {
        return Err(PlanError::PlanningFailed("goal is not collision-free".into()));
    }
    let edge_free = |a: Vec2, b: Vec2| env.segment_clearance(a, b) >= clearance;

    let gamma = params
        .rewire_gamma
        .unwrap_or_else(|| 2.0 * ((hi.x - lo.x) * (hi.y - lo.y)).sqrt());
    let mut rng = stream_rng(params.seed, STREAM_PLANNER_BASE);
    let mut nodes = vec![RrtNode {
        pos: start,
        parent: 0,
        cost: 0.0,
    }];
    let mut children: Vec<Vec<usize>> = vec![Vec::new()];
    let mut grid = PointGrid::new(lo, hi, params.step);
    grid.insert(0, start);

    for _ in 0..params.max_iters {
        let sample = if rng.gen::<f64>() < params.goal_bias {
            goal
        } else {
            Vec2::new(rng.gen_range(lo.x..=hi.x), rng.gen_range(lo.y..=hi.y))
        };
        let nearest = grid.nearest(&nodes, sample);
        let toward = sample - nodes[nearest].pos;
        let dist = toward.norm();
        if dist <= 1e-12 {
            continue;
        }
        let new_pos = if dist <= params.step {
            sample
        } else {
            nodes[nearest].pos + toward * (params.step / dist)
        };
        if !point_free(new_pos) {
            continue;
        }

        let n = nodes.len() as f64;
        let radius = (gamma * ((n.ln().max(0.0)) / n).sqrt()).min(params.step);
        let neighbors = grid.in_radius(&nodes, new_pos, radius);

        // Cheapest valid parent among the neighborhood (nearest as fallback).
        let mut parent = usize::MAX;
        let mut best_cost = f64::INFINITY;
        let consider = |idx: usize, parent: &mut usize, best_cost: &mut f64| {
            let c = nodes[idx].cost + (new_pos - nodes[idx].pos).norm();
            if c < *best_cost && edge_free(nodes[idx].pos, new_pos) {
                *best_cost = c;
                *parent = idx;
            }
        };
        consider(nearest, &mut parent, &mut best_cost);
        for &idx in &neighbors {
            if idx != nearest {
                consider(idx, &mut parent, &mut best_cost);
            }
        }
        if parent == usize::MAX {
            continue;
        }

        let new_idx = nodes.len();
        nodes.push(RrtNode {
            pos: new_pos,
            parent,
            cost: best_cost,
        });
        children.push(Vec::new());
        children[parent].push(new_idx);
        grid.insert(new_idx, new_pos);

        // Rewire neighbors through the new node when that shortens them.
        for &idx in &neighbors {
            if idx == parent {
                continue;
            }
            let through = best_cost + (nodes[idx].pos - new_pos).norm();
            if through + 1e-12 < nodes[idx].cost && edge_free(new_pos, nodes[idx].pos) {
                let old_parent = nodes[idx].parent;
                children[old_parent].retain(|&c| c != idx);
                children[new_idx].push(idx);
                nodes[idx].parent = new_idx;
                let delta = nodes[idx].cost - through;
                nodes[idx].cost = through;
                // Propagate the saving to the whole subtree.
                let mut stack = children[idx].clone();
                while let Some(v) = stack.pop() {
                    nodes[v].cost -= delta;
                    stack.extend_from_slice(&children[v]);
                }
            }
        }
    }

    // Best finishing move: cheapest tree node that can legally connect to goal.
    let mut best: Option<(f64, usize)> = None;
    for idx in grid.in_radius(&nodes, goal, params.step) {
        let total = nodes[idx].cost + (goal - nodes[idx].pos).norm();
        if best.map_or(true, |(c, _)| total < c) && edge_free(nodes[idx].pos, goal) {
            best = Some((total, idx));
        }
    }
    let (_, mut at) = best.ok_or_else(|| {
        PlanError::PlanningFailed(format!("no path found within {} iterations", params.max_iters))
    })?;

    let mut rev = Vec::new();
    if (nodes[at].pos - goal).norm() > 1e-9 {
        rev.push(goal);
    }
    loop {
        rev.push(nodes[at].pos);
        if at == 0 {
            break;
        }
        at = nodes[at].parent;
    }
    rev.reverse();
    GlobalPath::new(rev, PathSource::RrtStar)
}

// ---------------------------------------------------------------------------
// Lane-graph A*
// ---------------------------------------------------------------------------

/// Farthest a start/goal may sit from the lane graph before snapping fails.
pub const LANE_SNAP_MAX: f64 = 5.0;

/// Wrapper giving f64 a total order for the open set.
#[derive(PartialEq)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Shortest directed route across the lane graph, start/goal snapped to their
/// nearest nodes (within [`LANE_SNAP_MAX`]). Euclidean heuristic; ties broken
/// by smaller node index.
pub fn astar_lanes(env: &Environment, start: Vec2, goal: Vec2) -> Result<GlobalPath, PlanError> {
    let lanes = env
        .lanes
        .as_ref()
        .ok_or_else(|| PlanError::PlanningFailed("environment has no lane graph".into()))?;
    let snap = |p: Vec2, what: &str| -> Result<usize, PlanError> {
        let (idx, d) = lanes.nearest_node(p);
        if d <= LANE_SNAP_MAX {
            Ok(idx)
        } else {
            Err(PlanError::PlanningFailed(format!(
                "{what} is {d:.1} m from the lane graph (max {LANE_SNAP_MAX})"
            )))
        }
    };
    let s = snap(start, "start")?;
    let g = snap(goal, "goal")?;
    if s == g {
        return Err(PlanError::PlanningFailed(
            "start and goal snap to the same lane node".into(),
        ));
    }

    let nodes = lanes.nodes();
    let h = |n: usize| (nodes[g] - nodes[n]).norm();
    let mut dist = vec![f64::INFINITY; nodes.len()];
    let mut came: Vec<usize> = vec![usize::MAX; nodes.len()];
    let mut open = BinaryHeap::new();
    dist[s] = 0.0;
    open.push(Reverse((OrdF64(h(s)), s)));
    while let Some(Reverse((OrdF64(f), n))) = open.pop() {
        if f > dist[n] + h(n) + 1e-12 {
            continue; // stale entry
        }
        if n == g {
            break;
        }
        for &e in lanes.out_edges(n) {
            let edge = lanes.edges()[e];
            let nd = dist[n] + edge.length;
            if nd < dist[edge.to] {
                dist[edge.to] = nd;
                came[edge.to] = n;
                open.push(Reverse((OrdF64(nd + h(edge.to)), edge.to)));
            }
        }
    }
    if !dist[g].is_finite() {
        return Err(PlanError::PlanningFailed(
            "goal unreachable along lane directions".into(),
        ));
    }
    let mut rev = vec![nodes[g]];
    let mut at = g;
    while at != s {
        at = came[at];
        rev.push(nodes[at]);
    }
    rev.reverse();
    GlobalPath::new(rev, PathSource::Structured)
}

// ---------------------------------------------------------------------------
// Shortcutting
// ---------------------------------------------------------------------------

/// Greedy shortcutting: repeatedly drop any interior waypoint whose bridging
/// segment keeps `clearance` from all obstacles. Endpoints are preserved and
/// the result is never longer than the input.
pub fn simplify_path(path: &GlobalPath, env: &Environment, clearance: f64) -> GlobalPath {
    let mut pts = path.waypoints.clone();
    let mut changed = true;
    while changed {
        changed = false;
        let mut k = 1;
        while k + 1 < pts.len() {
            if env.segment_clearance(pts[k - 1], pts[k + 1]) >= clearance {
                pts.remove(k);
                changed = true;
            } else {
                k += 1;
            }
        }
    }
    GlobalPath::new(pts, path.source).expect("shortcutting preserves path validity")
}
