//! Bipartite factor graph and the synchronous Gaussian belief propagation
//! engine that runs on it.
//!
//! One graph belongs to one robot: a chain of K state variables over the
//! planning horizon, tied together by dynamics factors and shaped by unary
//! anchor/obstacle/tracking factors. Inter-robot coupling is handled outside
//! the graph by the comms layer, which deposits messages into per-variable
//! external inboxes keyed by peer robot id.
//!
//! A round is synchronous flooding: every enabled factor recomputes its
//! outgoing messages from the previous round's variable messages, then every
//! variable rebuilds its belief and cavity messages. Factors relinearize at the
//! current belief means on every round.

use crate::env::SdfGrid;
use crate::factors::{
    self, tracking_message_row, TrackingContext,
};
use crate::gaussian::InfoGaussian;
use crate::types::{RobotState, STATE_DIM};
use nalgebra::{DMatrix, DVector, Vector4};
use std::collections::BTreeMap;
use thiserror::Error;

/// Smallest precision eigenvalue at which a belief counts as determined
/// enough to relinearize at. Real information sources sit many orders of
/// magnitude above this; rank-deficiency noise sits many below.
const MIN_BELIEF_PRECISION: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{kind} factor connects {want} variables, got {got}")]
    BadArity {
        kind: &'static str,
        want: usize,
        got: usize,
    },
    #[error("unknown variable id {0}")]
    UnknownVariable(usize),
    #[error("factor {0} is not a pose anchor")]
    NotAnchor(usize),
}

/// Factor kinds evaluated inside a single robot's graph. Inter-robot factors
/// span two graphs and live with the communication links instead.
#[derive(Debug, Clone)]
pub enum FactorKind {
    Pose { anchor: Vector4<f64> },
    Dynamics { dt: f64 },
    Obstacle,
    Tracking,
}

impl FactorKind {
    fn name(&self) -> &'static str {
        match self {
            FactorKind::Pose { .. } => "pose",
            FactorKind::Dynamics { .. } => "dynamics",
            FactorKind::Obstacle => "obstacle",
            FactorKind::Tracking => "tracking",
        }
    }

    fn arity(&self) -> usize {
        match self {
            FactorKind::Dynamics { .. } => 2,
            _ => 1,
        }
    }
}

/// Environment the nonlinear factors read at evaluation time. Pose and
/// dynamics factors need none of it; a missing piece disables the factors
/// that would need it.
#[derive(Debug, Clone, Copy, Default)]
pub struct GraphCtx<'a> {
    pub sdf: Option<&'a SdfGrid>,
    pub d_o: f64,
    pub tracking: Option<TrackingContext<'a>>,
}

impl GraphCtx<'_> {
    /// Context for graphs containing only pose and dynamics factors.
    pub fn none() -> Self {
        Self::default()
    }
}

#[derive(Debug)]
pub struct VariableNode {
    belief: InfoGaussian,
    lin_point: Vector4<f64>,
    timestep_offset: f64,
    adjacent: Vec<usize>,
    inbox: Vec<InfoGaussian>,
    ext_inbox: BTreeMap<usize, InfoGaussian>,
}

impl VariableNode {
    pub fn belief(&self) -> &InfoGaussian {
        &self.belief
    }

    /// Current linearization point (the latest invertible belief mean).
    pub fn lin_point(&self) -> Vector4<f64> {
        self.lin_point
    }

    pub fn timestep_offset(&self) -> f64 {
        self.timestep_offset
    }

    pub fn adjacent_factors(&self) -> &[usize] {
        &self.adjacent
    }

    /// Belief with one peer's external message removed: the cavity this
    /// variable sends across the corresponding inter-robot link.
    pub fn cavity_for_peer(&self, peer: usize) -> InfoGaussian {
        match self.ext_inbox.get(&peer) {
            Some(msg) => self
                .belief
                .minus(msg)
                .expect("external messages share the state dimension"),
            None => self.belief.clone(),
        }
    }
}

#[derive(Debug)]
pub struct FactorNode {
    kind: FactorKind,
    adjacent: Vec<usize>,
    sigma: f64,
    enabled: bool,
    inbox: Vec<InfoGaussian>,
    outbox: Vec<InfoGaussian>,
}

impl FactorNode {
    pub fn kind(&self) -> &FactorKind {
        &self.kind
    }

    pub fn adjacent_variables(&self) -> &[usize] {
        &self.adjacent
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }
}

#[derive(Debug)]
pub struct FactorGraph {
    vars: Vec<VariableNode>,
    factors: Vec<FactorNode>,
    damping: f64,
    diag_singular: u64,
}

impl FactorGraph {
    /// `damping` blends each new factor message with its predecessor:
    /// (1−β)·new + β·old. Zero means undamped.
    pub fn new(damping: f64) -> Self {
        assert!((0.0..=0.7).contains(&damping), "damping must be in [0, 0.7]");
        Self {
            vars: Vec::new(),
            factors: Vec::new(),
            damping,
            diag_singular: 0,
        }
    }

    /// Count of factor updates that hit a singular marginalization and fell
    /// back to a vacuous message.
    pub fn singular_updates(&self) -> u64 {
        self.diag_singular
    }

    pub fn num_variables(&self) -> usize {
        self.vars.len()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn variable(&self, id: usize) -> &VariableNode {
        &self.vars[id]
    }

    pub fn factor(&self, id: usize) -> &FactorNode {
        &self.factors[id]
    }

    pub fn add_variable(&mut self, timestep_offset: f64, initial: Vector4<f64>) -> usize {
        self.vars.push(VariableNode {
            belief: InfoGaussian::vacuous(STATE_DIM),
            lin_point: initial,
            timestep_offset,
            adjacent: Vec::new(),
            inbox: Vec::new(),
            ext_inbox: BTreeMap::new(),
        });
        self.vars.len() - 1
    }

    pub fn add_factor(
        &mut self,
        kind: FactorKind,
        adjacent: Vec<usize>,
        sigma: f64,
    ) -> Result<usize, GraphError> {
        let want = kind.arity();
        if adjacent.len() != want {
            return Err(GraphError::BadArity {
                kind: kind.name(),
                want,
                got: adjacent.len(),
            });
        }
        for &v in &adjacent {
            if v >= self.vars.len() {
                return Err(GraphError::UnknownVariable(v));
            }
        }
        assert!(sigma > 0.0, "factor noise must be positive");
        let id = self.factors.len();
        let slots = adjacent.len();
        for &v in &adjacent {
            self.vars[v].adjacent.push(id);
            self.vars[v].inbox.push(InfoGaussian::vacuous(STATE_DIM));
        }
        self.factors.push(FactorNode {
            kind,
            adjacent,
            sigma,
            enabled: true,
            inbox: vec![InfoGaussian::vacuous(STATE_DIM); slots],
            outbox: vec![InfoGaussian::vacuous(STATE_DIM); slots],
        });
        Ok(id)
    }

    pub fn set_enabled(&mut self, factor: usize, enabled: bool) {
        self.factors[factor].enabled = enabled;
    }

    /// Re-targets a pose anchor (used when the current state moves or the
    /// horizon-end target marches along the route).
    pub fn set_anchor(&mut self, factor: usize, anchor: Vector4<f64>) -> Result<(), GraphError> {
        match &mut self.factors[factor].kind {
            FactorKind::Pose { anchor: a } => {
                *a = anchor;
                Ok(())
            }
            _ => Err(GraphError::NotAnchor(factor)),
        }
    }

    /// Stores an inter-robot message for `variable`, replacing any previous
    /// message from the same peer.
    pub fn set_external(&mut self, variable: usize, peer: usize, msg: InfoGaussian) {
        self.vars[variable].ext_inbox.insert(peer, msg);
    }

    /// Drops all stored inter-robot messages (new timestep, new neighbors).
    pub fn clear_externals(&mut self) {
        for v in &mut self.vars {
            v.ext_inbox.clear();
        }
    }

    /// One factor's message recomputation. Messages land in the adjacent
    /// variables' inboxes after damping against the previous round.
    pub fn factor_update(&mut self, factor: usize, ctx: &GraphCtx) {
        let msgs = self.compute_factor_messages(factor, ctx);
        let beta = self.damping;
        for (slot, msg) in msgs.into_iter().enumerate() {
            let blended = msg.blend(&self.factors[factor].outbox[slot], beta);
            self.factors[factor].outbox[slot] = blended.clone();
            let var = self.factors[factor].adjacent[slot];
            let var_slot = self.vars[var]
                .adjacent
                .iter()
                .position(|&f| f == factor)
                .expect("factor is adjacent to its variable");
            self.vars[var].inbox[var_slot] = blended;
        }
    }

    /// One variable's belief rebuild: belief = product of every stored message
    /// (internal and external); cavity messages go back to each factor; the
    /// linearization point follows the belief mean while it stays invertible.
    pub fn variable_update(&mut self, variable: usize) {
        let mut belief = InfoGaussian::vacuous(STATE_DIM);
        for msg in &self.vars[variable].inbox {
            belief.accumulate(msg);
        }
        for msg in self.vars[variable].ext_inbox.values() {
            belief.accumulate(msg);
        }
        // During the first sweeps after a graph is (re)built, information from
        // the anchors has not yet reached every dimension of every variable.
        // Such a belief can still clear a float Cholesky on noise-level pivots
        // and "solve" to a state tens of meters away, and a factor linearized
        // there injects real pushes at a fictitious point. Keep the previous
        // linearization point until the belief constrains every direction.
        if let Some(mean) = belief.mean_if_determined(MIN_BELIEF_PRECISION) {
            self.vars[variable].lin_point = Vector4::from_column_slice(mean.as_slice());
        }
        for slot in 0..self.vars[variable].adjacent.len() {
            let cavity = belief
                .minus(&self.vars[variable].inbox[slot])
                .expect("inbox messages are state-sized");
            let factor = self.vars[variable].adjacent[slot];
            let f_slot = self.factors[factor]
                .adjacent
                .iter()
                .position(|&v| v == variable)
                .expect("variable is adjacent to its factor");
            self.factors[factor].inbox[f_slot] = cavity;
        }
        self.vars[variable].belief = belief;
    }

    /// `n` synchronous rounds: all factors, then all variables, in id order.
    pub fn iterate_internal(&mut self, n: usize, ctx: &GraphCtx) {
        for _ in 0..n {
            for f in 0..self.factors.len() {
                self.factor_update(f, ctx);
            }
            for v in 0..self.vars.len() {
                self.variable_update(v);
            }
        }
    }

    fn compute_factor_messages(&mut self, factor: usize, ctx: &GraphCtx) -> Vec<InfoGaussian> {
        let f = &self.factors[factor];
        let vacuous = || vec![InfoGaussian::vacuous(STATE_DIM); f.adjacent.len()];
        if !f.enabled {
            return vacuous();
        }
        match &f.kind {
            FactorKind::Pose { anchor } => {
                // Linear identity measurement: the message is the anchor itself
                // at the factor's precision, independent of linearization.
                let lam = 1.0 / (f.sigma * f.sigma);
                let eta = DVector::from_column_slice(anchor.as_slice()) * lam;
                let lambda = DMatrix::identity(STATE_DIM, STATE_DIM) * lam;
                vec![InfoGaussian::new(eta, lambda)]
            }
            FactorKind::Dynamics { dt } => {
                let x_a = self.vars[f.adjacent[0]].lin_point;
                let x_b = self.vars[f.adjacent[1]].lin_point;
                let j_small = factors::dynamics_jacobian(*dt);
                let h0 = factors::dynamics_h(&x_a, &x_b, *dt);
                let mut x0 = DVector::zeros(2 * STATE_DIM);
                x0.rows_mut(0, STATE_DIM).copy_from(&x_a);
                x0.rows_mut(STATE_DIM, STATE_DIM).copy_from(&x_b);
                let j = DMatrix::from_fn(STATE_DIM, 2 * STATE_DIM, |r, c| j_small[(r, c)]);
                let h = DVector::from_column_slice(h0.as_slice());
                let joint = linearized_info(&j, &h, &DVector::zeros(STATE_DIM), f.sigma, &x0);
                let cavity_a = f.inbox[0].clone();
                let cavity_b = f.inbox[1].clone();
                let msg_a = self.pair_message(&joint, &cavity_b, 0);
                let msg_b = self.pair_message(&joint, &cavity_a, 1);
                vec![msg_a, msg_b]
            }
            FactorKind::Obstacle => {
                let (sdf, d_o) = match (ctx.sdf, ctx.d_o) {
                    (Some(s), d) if d > 0.0 => (s, d),
                    _ => return vacuous(),
                };
                let x0 = self.vars[f.adjacent[0]].lin_point;
                let pos = crate::types::Vec2::new(x0[0], x0[1]);
                let h0 = factors::obstacle_h(pos, sdf, d_o);
                let row = factors::obstacle_jacobian(pos, sdf, d_o);
                if h0 == 0.0 && row.iter().all(|&x| x == 0.0) {
                    return vacuous(); // clear of the ramp: nothing to say
                }
                let j = DMatrix::from_fn(1, STATE_DIM, |_, c| row[c]);
                vec![linearized_info(
                    &j,
                    &DVector::from_element(1, h0),
                    &DVector::zeros(1),
                    f.sigma,
                    &DVector::from_column_slice(x0.as_slice()),
                )]
            }
            FactorKind::Tracking => {
                let tctx = match &ctx.tracking {
                    Some(t) => t,
                    None => return vacuous(),
                };
                let x0 = self.vars[f.adjacent[0]].lin_point;
                let state = RobotState::from_vector4(&x0);
                match tracking_message_row(&state, tctx) {
                    Some((h0, row)) => {
                        let j = DMatrix::from_fn(1, STATE_DIM, |_, c| row[c]);
                        vec![linearized_info(
                            &j,
                            &DVector::from_element(1, h0),
                            &DVector::zeros(1),
                            f.sigma,
                            &DVector::from_column_slice(x0.as_slice()),
                        )]
                    }
                    None => vacuous(), // close enough to the path
                }
            }
        }
    }

    /// Message to one side of a two-variable factor: fold the *other* side's
    /// cavity into the joint and marginalize onto the target block.
    fn pair_message(
        &mut self,
        joint: &InfoGaussian,
        other_cavity: &InfoGaussian,
        target: usize,
    ) -> InfoGaussian {
        match half_joint_message(joint, other_cavity, target) {
            Some(m) => m,
            None => {
                self.diag_singular += 1;
                InfoGaussian::vacuous(STATE_DIM)
            }
        }
    }
}

/// Message from a two-variable joint factor toward block `target` (0 or 1):
/// the other side's cavity is folded into the joint, then everything but the
/// target block is marginalized out. `None` when the marginalization is
/// singular.
pub(crate) fn half_joint_message(
    joint: &InfoGaussian,
    other_cavity: &InfoGaussian,
    target: usize,
) -> Option<InfoGaussian> {
    let mut padded_eta = DVector::zeros(2 * STATE_DIM);
    let mut padded_lambda = DMatrix::zeros(2 * STATE_DIM, 2 * STATE_DIM);
    let other = 1 - target;
    padded_eta
        .rows_mut(other * STATE_DIM, STATE_DIM)
        .copy_from(other_cavity.eta());
    padded_lambda
        .view_mut((other * STATE_DIM, other * STATE_DIM), (STATE_DIM, STATE_DIM))
        .copy_from(other_cavity.lambda());
    let padded = InfoGaussian::new(padded_eta, padded_lambda);
    let combined = joint.product(&padded).ok()?;
    let keep: Vec<usize> = (target * STATE_DIM..(target + 1) * STATE_DIM).collect();
    combined.marginalize(&keep).ok()
}

/// Information form of a linearized measurement h(x) ≈ h₀ + J(x − x₀) with
/// observation z and isotropic noise σ: Λ_f = JᵀΛ_zJ, η_f = JᵀΛ_z(Jx₀ − h₀ + z).
pub(crate) fn linearized_info(
    j: &DMatrix<f64>,
    h0: &DVector<f64>,
    z: &DVector<f64>,
    sigma: f64,
    x0: &DVector<f64>,
) -> InfoGaussian {
    let lam_z = 1.0 / (sigma * sigma);
    let lambda = j.transpose() * j * lam_z;
    let eta = j.transpose() * ((j * x0 - h0 + z) * lam_z);
    InfoGaussian::new(eta, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::{TrackingContext, TrackingParams};
    use crate::planners::{GlobalPath, PathSource};
    use crate::types::Vec2;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn anchor4(x: f64, y: f64, vx: f64, vy: f64) -> Vector4<f64> {
        Vector4::new(x, y, vx, vy)
    }

    #[test]
    fn single_pose_factor_sets_belief() {
        let mut g = FactorGraph::new(0.0);
        let v = g.add_variable(0.0, Vector4::zeros());
        let target = anchor4(1.0, 2.0, 0.5, -0.5);
        g.add_factor(FactorKind::Pose { anchor: target }, vec![v], 0.5)
            .unwrap();
        g.iterate_internal(1, &GraphCtx::none());
        let (mean, cov) = g.variable(v).belief().to_moments().unwrap();
        for k in 0..4 {
            assert_relative_eq!(mean[k], target[k], epsilon = 1e-12);
            assert_relative_eq!(cov[(k, k)], 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_unary_factors_product_and_cavities() {
        let mut g = FactorGraph::new(0.0);
        let v = g.add_variable(0.0, Vector4::zeros());
        let a = anchor4(2.0, 0.0, 0.0, 0.0);
        let b = anchor4(4.0, 2.0, 1.0, 1.0);
        let fa = g.add_factor(FactorKind::Pose { anchor: a }, vec![v], 1.0).unwrap();
        let fb = g.add_factor(FactorKind::Pose { anchor: b }, vec![v], 1.0).unwrap();
        g.iterate_internal(1, &GraphCtx::none());
        // Equal precisions: the belief mean is the midpoint.
        let (mean, _) = g.variable(v).belief().to_moments().unwrap();
        for k in 0..4 {
            assert_relative_eq!(mean[k], (a[k] + b[k]) / 2.0, epsilon = 1e-12);
        }
        // The cavity stored at each factor is exactly the other factor's message.
        let cav_at_fa = &g.factor(fa).inbox[0];
        let msg_from_fb = &g.factor(fb).outbox[0];
        assert_relative_eq!(
            (cav_at_fa.eta() - msg_from_fb.eta()).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            (cav_at_fa.lambda() - msg_from_fb.lambda()).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn three_factor_star_cavities_match_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut g = FactorGraph::new(0.0);
        let v = g.add_variable(0.0, Vector4::zeros());
        let mut ids = Vec::new();
        for _ in 0..3 {
            let anchor = Vector4::from_fn(|_, _| rng.gen_range(-3.0..3.0));
            let sigma = rng.gen_range(0.3..2.0);
            ids.push(
                g.add_factor(FactorKind::Pose { anchor }, vec![v], sigma)
                    .unwrap(),
            );
        }
        g.iterate_internal(2, &GraphCtx::none());
        for &skip in &ids {
            let mut oracle = InfoGaussian::vacuous(STATE_DIM);
            for &other in ids.iter().filter(|&&f| f != skip) {
                oracle.accumulate(&g.factor(other).outbox[0]);
            }
            let cavity = &g.factor(skip).inbox[0];
            assert_relative_eq!((cavity.eta() - oracle.eta()).norm(), 0.0, epsilon = 1e-10);
            assert_relative_eq!(
                (cavity.lambda() - oracle.lambda()).norm(),
                0.0,
                epsilon = 1e-10
            );
        }
    }

    /// Dense joint information assembly mirroring the graph's factor list,
    /// solved exactly — the oracle for tree-exactness checks.
    struct DenseOracle {
        lambda: DMatrix<f64>,
        eta: DVector<f64>,
    }

    impl DenseOracle {
        fn new(n_vars: usize) -> Self {
            Self {
                lambda: DMatrix::zeros(4 * n_vars, 4 * n_vars),
                eta: DVector::zeros(4 * n_vars),
            }
        }

        fn add_pose(&mut self, v: usize, anchor: &Vector4<f64>, sigma: f64) {
            let lam = 1.0 / (sigma * sigma);
            for k in 0..4 {
                self.lambda[(4 * v + k, 4 * v + k)] += lam;
                self.eta[4 * v + k] += lam * anchor[k];
            }
        }

        fn add_dynamics(&mut self, a: usize, b: usize, dt: f64, sigma: f64) {
            let lam = 1.0 / (sigma * sigma);
            let j_small = factors::dynamics_jacobian(dt);
            // Scatter JᵀΛJ into the (a, b) blocks.
            let cols: Vec<usize> = (0..4).map(|k| 4 * a + k).chain((0..4).map(|k| 4 * b + k)).collect();
            for (ci, &cgi) in cols.iter().enumerate() {
                for (cj, &cgj) in cols.iter().enumerate() {
                    let mut acc = 0.0;
                    for r in 0..4 {
                        acc += j_small[(r, ci)] * j_small[(r, cj)];
                    }
                    self.lambda[(cgi, cgj)] += lam * acc;
                }
            }
            // z = 0 and the factor is linear, so there is no η contribution.
        }

        fn marginals(&self) -> (DVector<f64>, DMatrix<f64>) {
            let cov = self.lambda.clone().try_inverse().expect("joint is PD");
            let mean = &cov * &self.eta;
            (mean, cov)
        }
    }

    #[test]
    fn dynamics_pair_matches_least_squares() {
        let dt = 0.5;
        let sigma_d = 0.1;
        let sigma_p = 1.0;
        let a = anchor4(0.0, 0.0, 1.0, 0.0);
        let b = anchor4(1.0, 0.5, 1.0, 0.0);
        let mut g = FactorGraph::new(0.0);
        let v0 = g.add_variable(0.0, Vector4::zeros());
        let v1 = g.add_variable(dt, Vector4::zeros());
        g.add_factor(FactorKind::Pose { anchor: a }, vec![v0], sigma_p).unwrap();
        g.add_factor(FactorKind::Pose { anchor: b }, vec![v1], sigma_p).unwrap();
        g.add_factor(FactorKind::Dynamics { dt }, vec![v0, v1], sigma_d).unwrap();
        g.iterate_internal(20, &GraphCtx::none());

        let mut oracle = DenseOracle::new(2);
        oracle.add_pose(0, &a, sigma_p);
        oracle.add_pose(1, &b, sigma_p);
        oracle.add_dynamics(0, 1, dt, sigma_d);
        let (mean, cov) = oracle.marginals();
        for (vi, v) in [v0, v1].into_iter().enumerate() {
            let (m, c) = g.variable(v).belief().to_moments().unwrap();
            for k in 0..4 {
                assert_relative_eq!(m[k], mean[4 * vi + k], epsilon = 1e-6);
                for l in 0..4 {
                    assert_relative_eq!(c[(k, l)], cov[(4 * vi + k, 4 * vi + l)], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_iterations_change_nothing() {
        let mut g = FactorGraph::new(0.0);
        let v = g.add_variable(0.0, Vector4::zeros());
        g.add_factor(
            FactorKind::Pose { anchor: anchor4(1.0, 0.0, 0.0, 0.0) },
            vec![v],
            1.0,
        )
        .unwrap();
        g.iterate_internal(3, &GraphCtx::none());
        let before = g.variable(v).belief().clone();
        g.iterate_internal(0, &GraphCtx::none());
        assert_eq!(g.variable(v).belief().eta(), before.eta());
        assert_eq!(g.variable(v).belief().lambda(), before.lambda());
    }

    #[test]
    fn three_variable_chain_matches_joint_solve() {
        let dt = 0.4;
        let a = anchor4(0.0, 0.0, 2.0, -1.0);
        let b = anchor4(1.0, -0.7, 2.0, -1.0);
        let mut g = FactorGraph::new(0.0);
        let vs: Vec<usize> = (0..3).map(|k| g.add_variable(k as f64 * dt, Vector4::zeros())).collect();
        g.add_factor(FactorKind::Pose { anchor: a }, vec![vs[0]], 0.8).unwrap();
        g.add_factor(FactorKind::Pose { anchor: b }, vec![vs[2]], 0.6).unwrap();
        g.add_factor(FactorKind::Dynamics { dt }, vec![vs[0], vs[1]], 0.1).unwrap();
        g.add_factor(FactorKind::Dynamics { dt }, vec![vs[1], vs[2]], 0.1).unwrap();
        g.iterate_internal(10, &GraphCtx::none());

        let mut oracle = DenseOracle::new(3);
        oracle.add_pose(0, &a, 0.8);
        oracle.add_pose(2, &b, 0.6);
        oracle.add_dynamics(0, 1, dt, 0.1);
        oracle.add_dynamics(1, 2, dt, 0.1);
        let (mean, cov) = oracle.marginals();
        for (vi, &v) in vs.iter().enumerate() {
            let (m, c) = g.variable(v).belief().to_moments().unwrap();
            for k in 0..4 {
                assert_relative_eq!(m[k], mean[4 * vi + k], epsilon = 1e-6);
                for l in 0..4 {
                    assert_relative_eq!(c[(k, l)], cov[(4 * vi + k, 4 * vi + l)], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn anchored_chain_means_interpolate_constant_velocity() {
        // Anchors consistent with one constant velocity: every interior mean
        // must land exactly on the interpolation.
        let k_total = 6;
        let dt = 0.5;
        let vel = Vec2::new(2.0, -1.0);
        let end = vel * dt * (k_total - 1) as f64;
        let mut g = FactorGraph::new(0.0);
        let vs: Vec<usize> = (0..k_total)
            .map(|k| g.add_variable(k as f64 * dt, Vector4::zeros()))
            .collect();
        g.add_factor(
            FactorKind::Pose { anchor: anchor4(0.0, 0.0, vel.x, vel.y) },
            vec![vs[0]],
            1e-3,
        )
        .unwrap();
        g.add_factor(
            FactorKind::Pose { anchor: anchor4(end.x, end.y, vel.x, vel.y) },
            vec![vs[k_total - 1]],
            1e-3,
        )
        .unwrap();
        for k in 0..k_total - 1 {
            g.add_factor(FactorKind::Dynamics { dt }, vec![vs[k], vs[k + 1]], 0.1)
                .unwrap();
        }
        g.iterate_internal(25, &GraphCtx::none());
        for (k, &v) in vs.iter().enumerate() {
            let m = g.variable(v).belief().mean().unwrap();
            let expect = vel * dt * k as f64;
            assert_relative_eq!(m[0], expect.x, epsilon = 1e-6);
            assert_relative_eq!(m[1], expect.y, epsilon = 1e-6);
            assert_relative_eq!(m[2], vel.x, epsilon = 1e-6);
            assert_relative_eq!(m[3], vel.y, epsilon = 1e-6);
        }
    }

    #[test]
    fn random_trees_reach_exact_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let n = rng.gen_range(3..=12);
            let mut g = FactorGraph::new(0.0);
            let vs: Vec<usize> = (0..n).map(|k| g.add_variable(k as f64, Vector4::zeros())).collect();
            let mut oracle = DenseOracle::new(n);
            // Random tree topology over dynamics factors.
            for k in 1..n {
                let parent = rng.gen_range(0..k);
                let dt = rng.gen_range(0.2..1.0);
                let sigma = rng.gen_range(0.1..1.0);
                g.add_factor(FactorKind::Dynamics { dt }, vec![vs[parent], vs[k]], sigma)
                    .unwrap();
                oracle.add_dynamics(parent, k, dt, sigma);
            }
            // Anchor the root plus a random sprinkling of others.
            for k in 0..n {
                if k == 0 || rng.gen_bool(0.3) {
                    let anchor = Vector4::from_fn(|_, _| rng.gen_range(-5.0..5.0));
                    let sigma = rng.gen_range(0.2..2.0);
                    g.add_factor(FactorKind::Pose { anchor }, vec![vs[k]], sigma).unwrap();
                    oracle.add_pose(k, &anchor, sigma);
                }
            }
            g.iterate_internal(2 * n + 5, &GraphCtx::none());
            let (mean, cov) = oracle.marginals();
            for (vi, &v) in vs.iter().enumerate() {
                let (m, c) = g.variable(v).belief().to_moments().unwrap();
                for k in 0..4 {
                    assert_relative_eq!(m[k], mean[4 * vi + k], epsilon = 1e-6);
                    for l in 0..4 {
                        assert_relative_eq!(
                            c[(k, l)],
                            cov[(4 * vi + k, 4 * vi + l)],
                            epsilon = 1e-6
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn converged_linear_graph_is_idempotent() {
        let dt = 0.4;
        let mut g = FactorGraph::new(0.0);
        let vs: Vec<usize> = (0..4).map(|k| g.add_variable(k as f64 * dt, Vector4::zeros())).collect();
        g.add_factor(
            FactorKind::Pose { anchor: anchor4(0.0, 0.0, 1.0, 1.0) },
            vec![vs[0]],
            0.5,
        )
        .unwrap();
        g.add_factor(
            FactorKind::Pose { anchor: anchor4(3.0, 1.0, 0.0, 0.0) },
            vec![vs[3]],
            0.5,
        )
        .unwrap();
        for k in 0..3 {
            g.add_factor(FactorKind::Dynamics { dt }, vec![vs[k], vs[k + 1]], 0.1).unwrap();
        }
        g.iterate_internal(30, &GraphCtx::none());
        let before: Vec<DVector<f64>> = vs
            .iter()
            .map(|&v| g.variable(v).belief().mean().unwrap())
            .collect();
        g.iterate_internal(1, &GraphCtx::none());
        for (k, &v) in vs.iter().enumerate() {
            let after = g.variable(v).belief().mean().unwrap();
            assert!((after - &before[k]).norm() < 1e-9);
        }
    }

    #[test]
    fn mailboxes_stay_one_to_one() {
        let mut g = FactorGraph::new(0.0);
        let vs: Vec<usize> = (0..3).map(|k| g.add_variable(k as f64, Vector4::zeros())).collect();
        g.add_factor(
            FactorKind::Pose { anchor: Vector4::zeros() },
            vec![vs[0]],
            1.0,
        )
        .unwrap();
        for k in 0..2 {
            g.add_factor(FactorKind::Dynamics { dt: 0.5 }, vec![vs[k], vs[k + 1]], 0.1).unwrap();
        }
        g.iterate_internal(5, &GraphCtx::none());
        for f in 0..g.num_factors() {
            let node = g.factor(f);
            assert_eq!(node.inbox.len(), node.adjacent.len());
            assert_eq!(node.outbox.len(), node.adjacent.len());
        }
        for v in 0..g.num_variables() {
            let node = g.variable(v);
            assert_eq!(node.inbox.len(), node.adjacent.len());
        }
    }

    #[test]
    fn disabled_factor_sends_vacuous_messages() {
        let mut g = FactorGraph::new(0.0);
        let v = g.add_variable(0.0, Vector4::zeros());
        let keep = g
            .add_factor(FactorKind::Pose { anchor: anchor4(1.0, 1.0, 0.0, 0.0) }, vec![v], 1.0)
            .unwrap();
        let off = g
            .add_factor(FactorKind::Pose { anchor: anchor4(9.0, 9.0, 0.0, 0.0) }, vec![v], 1.0)
            .unwrap();
        g.set_enabled(off, false);
        g.iterate_internal(2, &GraphCtx::none());
        assert!(g.factor(off).outbox[0].is_vacuous());
        let m = g.variable(v).belief().mean().unwrap();
        assert_relative_eq!(m[0], 1.0, epsilon = 1e-12);
        let _ = keep;
    }

    #[test]
    fn tracking_factor_pulls_variable_toward_path() {
        let path = GlobalPath::new(
            vec![Vec2::zeros(), Vec2::new(20.0, 0.0)],
            PathSource::Manual,
        )
        .unwrap();
        let tparams = TrackingParams { r_switch: 2.0, s_v: 5.0, d_a: 4.0 };
        let start = anchor4(5.0, 2.0, 0.0, 0.0);
        let mut g = FactorGraph::new(0.0);
        let v = g.add_variable(0.0, start);
        // Weak positional prior keeps the belief proper without fighting the pull.
        g.add_factor(FactorKind::Pose { anchor: start }, vec![v], 1e3).unwrap();
        g.add_factor(FactorKind::Tracking, vec![v], 0.15).unwrap();
        let tctx = TrackingContext::new(&path, 0, tparams).unwrap();
        let ctx = GraphCtx { sdf: None, d_o: 0.0, tracking: Some(tctx) };

        let mut dist = start[1].abs();
        g.iterate_internal(1, &ctx);
        let after_one = g.variable(v).belief().mean().unwrap()[1].abs();
        assert!(after_one < dist - 1e-6, "one round: {after_one} vs {dist}");
        dist = after_one;

        g.iterate_internal(99, &ctx);
        let settled = g.variable(v).belief().mean().unwrap()[1].abs();
        assert!(settled < dist);
        assert!(settled < 0.05, "converges onto the path, got {settled}");
    }

    #[test]
    fn bad_arity_and_unknown_variable_rejected() {
        let mut g = FactorGraph::new(0.0);
        let v = g.add_variable(0.0, Vector4::zeros());
        assert!(matches!(
            g.add_factor(FactorKind::Dynamics { dt: 0.1 }, vec![v], 0.1),
            Err(GraphError::BadArity { .. })
        ));
        assert!(matches!(
            g.add_factor(FactorKind::Obstacle, vec![7], 0.1),
            Err(GraphError::UnknownVariable(7))
        ));
    }

    #[test]
    fn anchor_retarget_only_on_pose_factors() {
        let mut g = FactorGraph::new(0.0);
        let v0 = g.add_variable(0.0, Vector4::zeros());
        let v1 = g.add_variable(1.0, Vector4::zeros());
        let p = g.add_factor(FactorKind::Pose { anchor: Vector4::zeros() }, vec![v0], 1.0).unwrap();
        let d = g.add_factor(FactorKind::Dynamics { dt: 1.0 }, vec![v0, v1], 0.1).unwrap();
        assert!(g.set_anchor(p, anchor4(1.0, 0.0, 0.0, 0.0)).is_ok());
        assert!(matches!(g.set_anchor(d, Vector4::zeros()), Err(GraphError::NotAnchor(_))));
    }

    #[test]
    fn external_messages_enter_belief_and_cavity() {
        let mut g = FactorGraph::new(0.0);
        let v = g.add_variable(0.0, Vector4::zeros());
        g.add_factor(FactorKind::Pose { anchor: anchor4(1.0, 0.0, 0.0, 0.0) }, vec![v], 1.0)
            .unwrap();
        let ext = InfoGaussian::new(
            DVector::from_column_slice(&[3.0, 0.0, 0.0, 0.0]),
            DMatrix::identity(4, 4),
        );
        g.set_external(v, 9, ext.clone());
        g.iterate_internal(1, &GraphCtx::none());
        // Belief mean: precision-weighted blend of anchor(1.0) and external(3.0).
        let m = g.variable(v).belief().mean().unwrap();
        assert_relative_eq!(m[0], 2.0, epsilon = 1e-12);
        // Cavity toward peer 9 removes exactly the external message.
        let cavity = g.variable(v).cavity_for_peer(9);
        let expected = g.variable(v).belief().minus(&ext).unwrap();
        assert_relative_eq!((cavity.eta() - expected.eta()).norm(), 0.0, epsilon = 1e-12);
        g.clear_externals();
        g.iterate_internal(1, &GraphCtx::none());
        let m2 = g.variable(v).belief().mean().unwrap();
        assert_relative_eq!(m2[0], 1.0, epsilon = 1e-12);
    }
}
