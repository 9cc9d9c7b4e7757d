//! Environment model: obstacle primitives, signed-distance grid, exact colliders,
//! and the directed lane graph used by the structured planner.
//!
//! Environments load from a strict JSON file (unknown keys rejected) so maps ship
//! as data. Exact collider geometry is used for collision metrics and planner
//! clearance checks; the sampled SDF grid exists only for the obstacle factor.

use crate::types::Vec2;
use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

/// Default SDF resolution: a quarter of the default robot diameter.
pub const DEFAULT_SDF_CELL: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("cannot read environment file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("environment parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid environment: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vec2,
    pub max: Vec2,
}

impl Bounds {
    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Obstacle {
    Circle { center: Vec2, radius: f64 },
    Polygon { vertices: Vec<Vec2> },
}

impl Obstacle {
    /// Exact signed distance to the obstacle boundary; negative inside.
    pub fn signed_distance(&self, p: Vec2) -> f64 {
        match self {
            Obstacle::Circle { center, radius } => (p - center).norm() - radius,
            Obstacle::Polygon { vertices } => {
                let boundary = polygon_boundary_distance(p, vertices);
                if point_in_polygon(p, vertices) {
                    -boundary
                } else {
                    boundary
                }
            }
        }
    }

    /// Distance from a segment to the obstacle; ≤ 0 when they touch or overlap.
    pub fn segment_distance(&self, a: Vec2, b: Vec2) -> f64 {
        match self {
            Obstacle::Circle { center, radius } => dist_point_segment(*center, a, b) - radius,
            Obstacle::Polygon { vertices } => {
                if point_in_polygon(a, vertices) || point_in_polygon(b, vertices) {
                    return self.signed_distance(a).min(self.signed_distance(b));
                }
                let n = vertices.len();
                let mut best = f64::INFINITY;
                for i in 0..n {
                    let (e0, e1) = (vertices[i], vertices[(i + 1) % n]);
                    if segments_intersect(a, b, e0, e1) {
                        return 0.0;
                    }
                    best = best.min(seg_seg_distance(a, b, e0, e1));
                }
                best
            }
        }
    }
}

/// Strict circle-circle intersection: true iff center distance < r1 + r2.
pub fn circle_circle_intersects(c1: Vec2, r1: f64, c2: Vec2, r2: f64) -> bool {
    (c1 - c2).norm() < r1 + r2
}

/// Regular grid of signed distances sampled at cell centers; negative inside
/// obstacles. Queries interpolate bilinearly and clamp outside the extent.
#[derive(Debug, Clone)]
pub struct SdfGrid {
    origin: Vec2,
    cell: f64,
    nx: usize,
    ny: usize,
    data: Vec<f64>,
}

impl SdfGrid {
    /// Brute-force construction: exact signed distance to every obstacle at each
    /// cell center, capped at the bounds diagonal (free-space sentinel).
    pub fn build(bounds: &Bounds, obstacles: &[Obstacle], cell: f64) -> Result<Self, EnvError> {
        if !(cell > 0.0) {
            return Err(EnvError::Invalid("sdf cell size must be > 0".into()));
        }
        if !(bounds.width() > 0.0 && bounds.height() > 0.0) {
            return Err(EnvError::Invalid("bounds must have positive area".into()));
        }
        let nx = (bounds.width() / cell).ceil() as usize + 1;
        let ny = (bounds.height() / cell).ceil() as usize + 1;
        let cap = bounds.diagonal();
        let mut data = vec![cap; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let p = bounds.min + Vec2::new((i as f64 + 0.5) * cell, (j as f64 + 0.5) * cell);
                let mut d = cap;
                for ob in obstacles {
                    d = d.min(ob.signed_distance(p));
                }
                data[j * nx + i] = d;
            }
        }
        Ok(Self {
            origin: bounds.min,
            cell,
            nx,
            ny,
            data,
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    /// Bilinear interpolation of the four surrounding cell centers.
    pub fn sample(&self, p: Vec2) -> f64 {
        let u = ((p.x - self.origin.x) / self.cell - 0.5).clamp(0.0, (self.nx - 1) as f64);
        let v = ((p.y - self.origin.y) / self.cell - 0.5).clamp(0.0, (self.ny - 1) as f64);
        let i0 = (u.floor() as usize).min(self.nx - 1);
        let j0 = (v.floor() as usize).min(self.ny - 1);
        let i1 = (i0 + 1).min(self.nx - 1);
        let j1 = (j0 + 1).min(self.ny - 1);
        let fu = u - i0 as f64;
        let fv = v - j0 as f64;
        let at = |i: usize, j: usize| self.data[j * self.nx + i];
        let top = at(i0, j1) * (1.0 - fu) + at(i1, j1) * fu;
        let bottom = at(i0, j0) * (1.0 - fu) + at(i1, j0) * fu;
        bottom * (1.0 - fv) + top * fv
    }
}

/// One-way lane segment between two lane nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneEdge {
    pub from: usize,
    pub to: usize,
    pub length: f64,
}

/// Directed lane graph; edges represent lanes traversable in one direction.
#[derive(Debug, Clone)]
pub struct LaneGraph {
    nodes: Vec<Vec2>,
    edges: Vec<LaneEdge>,
    out: Vec<Vec<usize>>,
}

impl LaneGraph {
    /// Builds from node coordinates and directed (from, to) index pairs.
    /// Edge lengths are the Euclidean node distances. The graph must be
    /// connected once directions are ignored (a data-entry sanity check;
    /// traversal itself respects direction).
    pub fn from_parts(nodes: Vec<Vec2>, pairs: &[(usize, usize)]) -> Result<Self, EnvError> {
        if nodes.len() < 2 {
            return Err(EnvError::Invalid("lane graph needs at least 2 nodes".into()));
        }
        let mut edges = Vec::with_capacity(pairs.len());
        let mut out = vec![Vec::new(); nodes.len()];
        for &(from, to) in pairs {
            if from >= nodes.len() || to >= nodes.len() {
                return Err(EnvError::Invalid(format!(
                    "lane edge ({from}, {to}) references a missing node"
                )));
            }
            if from == to {
                return Err(EnvError::Invalid(format!("lane edge ({from}, {to}) is a self-loop")));
            }
            let length = (nodes[to] - nodes[from]).norm();
            if length <= 0.0 {
                return Err(EnvError::Invalid(format!(
                    "lane edge ({from}, {to}) has zero length"
                )));
            }
            out[from].push(edges.len());
            edges.push(LaneEdge { from, to, length });
        }
        let graph = Self { nodes, edges, out };
        if !graph.connected_ignoring_direction() {
            return Err(EnvError::Invalid(
                "lane graph is disconnected (ignoring direction)".into(),
            ));
        }
        Ok(graph)
    }

    pub fn nodes(&self) -> &[Vec2] {
        &self.nodes
    }

    pub fn edges(&self) -> &[LaneEdge] {
        &self.edges
    }

    pub fn out_edges(&self, node: usize) -> &[usize] {
        &self.out[node]
    }

    /// Nearest node to a point and its distance.
    pub fn nearest_node(&self, p: Vec2) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = (p - n).norm();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn connected_ignoring_direction(&self) -> bool {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            adj[e.from].push(e.to);
            adj[e.to].push(e.from);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == n
    }
}

/// Immutable world geometry shared read-only by all robots.
#[derive(Debug, Clone)]
pub struct Environment {
    pub bounds: Bounds,
    pub obstacles: Vec<Obstacle>,
    pub lanes: Option<LaneGraph>,
    pub sdf: SdfGrid,
}

impl Environment {
    pub fn new(
        bounds: Bounds,
        obstacles: Vec<Obstacle>,
        lanes: Option<LaneGraph>,
        sdf_cell: f64,
    ) -> Result<Self, EnvError> {
        for (idx, ob) in obstacles.iter().enumerate() {
            validate_obstacle(idx, ob, &bounds)?;
        }
        let sdf = SdfGrid::build(&bounds, &obstacles, sdf_cell)?;
        Ok(Self {
            bounds,
            obstacles,
            lanes,
            sdf,
        })
    }

    pub fn from_json_str(text: &str, sdf_cell: f64) -> Result<Self, EnvError> {
        let file: EnvFile = serde_json::from_str(text)?;
        let bounds = Bounds {
            min: Vec2::new(file.bounds.min[0], file.bounds.min[1]),
            max: Vec2::new(file.bounds.max[0], file.bounds.max[1]),
        };
        if !(bounds.width() > 0.0 && bounds.height() > 0.0) {
            return Err(EnvError::Invalid("bounds must have positive area".into()));
        }
        let obstacles = file
            .obstacles
            .into_iter()
            .map(|ob| match ob {
                ObstacleFile::Circle { center, radius } => Obstacle::Circle {
                    center: Vec2::new(center[0], center[1]),
                    radius,
                },
                ObstacleFile::Polygon { vertices } => Obstacle::Polygon {
                    vertices: vertices.iter().map(|v| Vec2::new(v[0], v[1])).collect(),
                },
            })
            .collect();
        let lanes = match file.lanes {
            Some(l) => {
                let nodes = l.nodes.iter().map(|v| Vec2::new(v[0], v[1])).collect();
                let pairs: Vec<(usize, usize)> = l.edges.iter().map(|e| (e[0], e[1])).collect();
                Some(LaneGraph::from_parts(nodes, &pairs)?)
            }
            None => None,
        };
        Self::new(bounds, obstacles, lanes, sdf_cell)
    }

    pub fn from_file(path: &Path, sdf_cell: f64) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text, sdf_cell)
    }

    /// Exact signed distance to the nearest obstacle (collider geometry, not SDF).
    pub fn signed_distance(&self, p: Vec2) -> f64 {
        let mut d = self.bounds.diagonal();
        for ob in &self.obstacles {
            d = d.min(ob.signed_distance(p));
        }
        d
    }

    /// Exact minimum distance from a segment to any obstacle; ≤ 0 on contact.
    pub fn segment_clearance(&self, a: Vec2, b: Vec2) -> f64 {
        let mut d = self.bounds.diagonal();
        for ob in &self.obstacles {
            d = d.min(ob.segment_distance(a, b));
            if d <= 0.0 {
                return d;
            }
        }
        d
    }

    /// Strict circle-vs-environment intersection test over exact colliders.
    pub fn circle_intersects(&self, center: Vec2, radius: f64) -> bool {
        self.obstacles
            .iter()
            .any(|ob| ob.signed_distance(center) < radius)
    }
}

fn validate_obstacle(idx: usize, ob: &Obstacle, bounds: &Bounds) -> Result<(), EnvError> {
    const EPS: f64 = 1e-9;
    let inside = |p: Vec2| {
        p.x >= bounds.min.x - EPS
            && p.x <= bounds.max.x + EPS
            && p.y >= bounds.min.y - EPS
            && p.y <= bounds.max.y + EPS
    };
    match ob {
        Obstacle::Circle { center, radius } => {
            if !(*radius > 0.0) {
                return Err(EnvError::Invalid(format!("obstacle {idx}: radius must be > 0")));
            }
            let r = Vec2::new(*radius, *radius);
            if !inside(center - r) || !inside(center + r) {
                return Err(EnvError::Invalid(format!("obstacle {idx}: outside bounds")));
            }
        }
        Obstacle::Polygon { vertices } => {
            if vertices.len() < 3 {
                return Err(EnvError::Invalid(format!(
                    "obstacle {idx}: polygon needs at least 3 vertices"
                )));
            }
            for w in vertices.windows(2) {
                if (w[1] - w[0]).norm() <= EPS {
                    return Err(EnvError::Invalid(format!(
                        "obstacle {idx}: repeated consecutive vertices"
                    )));
                }
            }
            if vertices.iter().any(|&v| !inside(v)) {
                return Err(EnvError::Invalid(format!("obstacle {idx}: outside bounds")));
            }
        }
    }
    Ok(())
}

// --- file schema (strict: unknown keys are errors) ---

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvFile {
    bounds: BoundsFile,
    obstacles: Vec<ObstacleFile>,
    #[serde(default)]
    lanes: Option<LanesFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsFile {
    min: [f64; 2],
    max: [f64; 2],
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum ObstacleFile {
    Circle { center: [f64; 2], radius: f64 },
    Polygon { vertices: Vec<[f64; 2]> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LanesFile {
    nodes: Vec<[f64; 2]>,
    edges: Vec<[usize; 2]>,
}

// --- planar geometry helpers ---

/// Distance from point `p` to segment `a`-`b` (projection clamped to the segment).
pub fn dist_point_segment(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn orientation(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Proper and degenerate segment intersection test.
pub fn segments_intersect(a1: Vec2, a2: Vec2, b1: Vec2, b2: Vec2) -> bool {
    let d1 = orientation(b1, b2, a1);
    let d2 = orientation(b1, b2, a2);
    let d3 = orientation(a1, a2, b1);
    let d4 = orientation(a1, a2, b2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(b1, b2, a1))
        || (d2 == 0.0 && on_segment(b1, b2, a2))
        || (d3 == 0.0 && on_segment(a1, a2, b1))
        || (d4 == 0.0 && on_segment(a1, a2, b2))
}

/// Minimum distance between two segments (0 when they intersect).
pub fn seg_seg_distance(a1: Vec2, a2: Vec2, b1: Vec2, b2: Vec2) -> f64 {
    if segments_intersect(a1, a2, b1, b2) {
        return 0.0;
    }
    dist_point_segment(a1, b1, b2)
        .min(dist_point_segment(a2, b1, b2))
        .min(dist_point_segment(b1, a1, a2))
        .min(dist_point_segment(b2, a1, a2))
}

/// Even-odd rule point-in-polygon test.
pub fn point_in_polygon(p: Vec2, vertices: &[Vec2]) -> bool {
    let n = vertices.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (vi, vj) = (vertices[i], vertices[j]);
        if (vi.y > p.y) != (vj.y > p.y) {
            let x_cross = vj.x + (p.y - vj.y) / (vi.y - vj.y) * (vi.x - vj.x);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn polygon_boundary_distance(p: Vec2, vertices: &[Vec2]) -> f64 {
    let n = vertices.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        best = best.min(dist_point_segment(p, vertices[i], vertices[(i + 1) % n]));
    }
    best
}
