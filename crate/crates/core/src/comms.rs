//! Inter-robot communication: neighbor discovery within radio range,
//! per-robot failure draws, and the avoidance links that exchange messages
//! between matching horizon variables of nearby robots.
//!
//! Each link couples variable k of robot A with variable k of robot B through
//! a hinge penalty on their predicted separation. Messages for a whole round
//! are computed from a frozen snapshot of every robot's beliefs and then
//! applied in one deterministic batch, so results are independent of thread
//! count and iteration order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::factors::{interrobot_h, interrobot_jacobian};
use crate::gaussian::InfoGaussian;
use crate::graph::{half_joint_message, linearized_info};
use crate::robot::Robot;
use crate::rng::{stream_rng, STREAM_COMMS};
use crate::types::STATE_DIM;

/// Seeded source of per-robot communication-failure draws.
#[derive(Debug)]
pub struct CommsChannel {
    gamma: f64,
    rng: ChaCha8Rng,
}

impl CommsChannel {
    /// `gamma` is the probability that a robot is offline for a timestep.
    pub fn new(seed: u64, gamma: f64) -> Self {
        assert!((0.0..=1.0).contains(&gamma), "gamma must be a probability");
        Self {
            gamma,
            rng: stream_rng(seed, STREAM_COMMS),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// One Bernoulli(γ) draw per robot, in robot order. A draw is consumed
    /// for every robot regardless of γ so the stream stays aligned.
    pub fn draw_offline(&mut self, count: usize) -> Vec<bool> {
        (0..count).map(|_| self.rng.gen::<f64>() < self.gamma).collect()
    }
}

/// All unordered pairs of active robots within radio range (strictly inside
/// the smaller of the two ranges). Returns indices into the slice, `a < b`.
pub fn neighbor_pairs(robots: &[Robot]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for a in 0..robots.len() {
        if !robots[a].is_active() {
            continue;
        }
        for b in a + 1..robots.len() {
            if !robots[b].is_active() {
                continue;
            }
            let range = robots[a]
                .config()
                .comms_radius
                .min(robots[b].config().comms_radius);
            if (robots[a].pose().pos - robots[b].pose().pos).norm() < range {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

/// One computed external message: deliver `msg` to `robot`'s variable `var`,
/// replacing whatever the peer previously sent there.
pub struct LinkMessage {
    pub robot: usize,
    pub var: usize,
    pub peer_id: usize,
    pub msg: InfoGaussian,
}

/// The messages of one external round, plus diagnostics.
pub struct LinkBatch {
    pub messages: Vec<LinkMessage>,
    pub singular: u64,
}

/// Computes both directions of every link from a read-only snapshot of the
/// robots. Links touch horizon variables 1..K−1 (variable 0 is pinned to the
/// measured pose, so pushing on it is useless).
pub fn compute_link_messages(robots: &[Robot], pairs: &[(usize, usize)]) -> LinkBatch {
    let mut messages = Vec::new();
    let mut singular = 0;
    for &(ia, ib) in pairs {
        let ra = &robots[ia];
        let rb = &robots[ib];
        let d_i = ra.config().factors.d_i.min(rb.config().factors.d_i);
        let sigma = ra
            .config()
            .factors
            .sigma_interrobot
            .min(rb.config().factors.sigma_interrobot);
        let k_max = ra.config().k_variables.min(rb.config().k_variables);
        for k in 1..k_max {
            let va = ra.graph.variable(k);
            let vb = rb.graph.variable(k);
            let xa = va.lin_point();
            let xb = vb.lin_point();
            let pa = crate::types::Vec2::new(xa[0], xa[1]);
            let pb = crate::types::Vec2::new(xb[0], xb[1]);
            let h = interrobot_h(pa, pb, d_i);
            let jac = interrobot_jacobian(pa, pb, d_i);

            if h == 0.0 && jac.iter().all(|&v| v == 0.0) {
                // Out of range at the linearization point: the link carries
                // no information this round.
                messages.push(LinkMessage {
                    robot: ia,
                    var: k,
                    peer_id: rb.id(),
                    msg: InfoGaussian::vacuous(STATE_DIM),
                });
                messages.push(LinkMessage {
                    robot: ib,
                    var: k,
                    peer_id: ra.id(),
                    msg: InfoGaussian::vacuous(STATE_DIM),
                });
                continue;
            }

            let j = DMatrix::from_row_slice(1, 2 * STATE_DIM, jac.as_slice());
            let mut x0 = DVector::zeros(2 * STATE_DIM);
            x0.rows_mut(0, STATE_DIM).copy_from(&xa);
            x0.rows_mut(STATE_DIM, STATE_DIM).copy_from(&xb);
            let joint = linearized_info(
                &j,
                &DVector::from_element(1, h),
                &DVector::zeros(1),
                sigma,
                &x0,
            );
            let cavity_a = va.cavity_for_peer(rb.id());
            let cavity_b = vb.cavity_for_peer(ra.id());

            let to_a = half_joint_message(&joint, &cavity_b, 0).unwrap_or_else(|| {
                singular += 1;
                InfoGaussian::vacuous(STATE_DIM)
            });
            let to_b = half_joint_message(&joint, &cavity_a, 1).unwrap_or_else(|| {
                singular += 1;
                InfoGaussian::vacuous(STATE_DIM)
            });
            messages.push(LinkMessage {
                robot: ia,
                var: k,
                peer_id: rb.id(),
                msg: to_a,
            });
            messages.push(LinkMessage {
                robot: ib,
                var: k,
                peer_id: ra.id(),
                msg: to_b,
            });
        }
    }
    LinkBatch { messages, singular }
}

/// Stores a batch into the receiving robots' external inboxes.
pub fn apply_link_messages(robots: &mut [Robot], batch: LinkBatch) -> u64 {
    for m in batch.messages {
        robots[m.robot].graph.set_external(m.var, m.peer_id, m.msg);
    }
    batch.singular
}
