//! Measurement models for the five factor kinds: pose anchor, constant-velocity
//! dynamics, obstacle avoidance, inter-robot avoidance, and path tracking.
//!
//! Each factor is described by a measurement function h(·) with observed value z
//! and a Jacobian row/block used for linearization. The tracking factor steers a
//! variable toward a moving measurement point on the robot's global path; its
//! published Jacobian form points along the pull direction scaled by 1/h, so the
//! message assembly uses the negated row (see `tracking_message_row`) to turn
//! that steering vector into the standard linearized-factor convention.

use crate::env::SdfGrid;
use crate::planners::GlobalPath;
use crate::types::{RobotState, Vec2};
use nalgebra::{Matrix4, RowSVector, SMatrix, Vector4};
use thiserror::Error;

/// Below this residual the tracking factor treats the variable as on-path and
/// emits no message (the 1/h term in the Jacobian is singular there).
pub const TRACKING_H_MIN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum FactorError {
    #[error("zero-length segment cannot define a projection")]
    DegenerateSegment,
    #[error("invalid tracking context: {0}")]
    InvalidContext(String),
}

/// Noise scales and activation distances for the factor library.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FactorParams {
    pub sigma_pose: f64,
    pub sigma_dynamics: f64,
    pub sigma_interrobot: f64,
    pub sigma_obstacle: f64,
    pub sigma_tracking: f64,
    /// Inter-robot factor activation distance (m).
    pub d_i: f64,
    /// Obstacle ramp width: h rises from 0 at this clearance to 1 at contact (m).
    pub d_o: f64,
}

impl FactorParams {
    /// Library defaults with distances derived from the robot radius.
    pub fn for_radius(robot_radius: f64) -> Self {
        Self {
            sigma_pose: 1e-15,
            sigma_dynamics: 0.1,
            sigma_interrobot: 0.005,
            sigma_obstacle: 0.005,
            sigma_tracking: 0.15,
            d_i: 10.0,
            d_o: robot_radius,
        }
    }
}

impl Default for FactorParams {
    fn default() -> Self {
        Self::for_radius(2.0)
    }
}

/// Tuning knobs of the tracking factor.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TrackingParams {
    /// Segment-switch radius around waypoints (m).
    pub r_switch: f64,
    /// Velocity scaling divisor for the forward-momentum term (m/s).
    pub s_v: f64,
    /// Distance at which the attraction saturates (m).
    pub d_a: f64,
}

impl TrackingParams {
    pub fn for_robot(robot_radius: f64, target_speed: f64) -> Self {
        Self {
            r_switch: robot_radius,
            s_v: target_speed,
            d_a: 2.0 * robot_radius,
        }
    }
}

impl Default for TrackingParams {
    fn default() -> Self {
        Self::for_robot(2.0, 5.0)
    }
}

/// Immutable view a tracking-factor evaluation needs: the path, the robot's
/// current segment index, and the tuning parameters.
#[derive(Debug, Clone, Copy)]
pub struct TrackingContext<'a> {
    path: &'a GlobalPath,
    i: usize,
    params: TrackingParams,
}

impl<'a> TrackingContext<'a> {
    pub fn new(path: &'a GlobalPath, i: usize, params: TrackingParams) -> Result<Self, FactorError> {
        if i > path.len() - 2 {
            return Err(FactorError::InvalidContext(format!(
                "segment index {i} out of range for {} waypoints",
                path.len()
            )));
        }
        if !(params.r_switch > 0.0 && params.s_v > 0.0 && params.d_a > 0.0) {
            return Err(FactorError::InvalidContext(
                "r_switch, s_v, d_a must all be positive".into(),
            ));
        }
        Ok(Self { path, i, params })
    }

    pub fn path(&self) -> &'a GlobalPath {
        self.path
    }

    pub fn segment_index(&self) -> usize {
        self.i
    }

    pub fn params(&self) -> TrackingParams {
        self.params
    }

    fn waypoint(&self, k: usize) -> Vec2 {
        self.path.waypoints()[k]
    }

    /// Projection of `x` onto the (infinite) line of segment `k`.
    fn projection(&self, x: Vec2, k: usize) -> Vec2 {
        // Path construction guarantees non-degenerate segments.
        project_onto_line(x, self.waypoint(k), self.waypoint(k + 1)).unwrap()
    }
}

/// Orthogonal projection of `x` onto the line through `p_i` and `p_next`.
/// Deliberately unclamped: the result may lie beyond either endpoint.
pub fn project_onto_line(x: Vec2, p_i: Vec2, p_next: Vec2) -> Result<Vec2, FactorError> {
    let seg = p_next - p_i;
    let len2 = seg.norm_squared();
    if len2 <= 0.0 {
        return Err(FactorError::DegenerateSegment);
    }
    Ok(p_i + seg * ((x - p_i).dot(&seg) / len2))
}

/// Corner-transition test: true when the projections onto the current and the
/// previous segment both fall within `r_switch` of the shared waypoint p_i.
/// The first segment has no predecessor, so q is false there.
pub fn transition_condition(x: Vec2, ctx: &TrackingContext) -> bool {
    if ctx.i == 0 {
        return false;
    }
    let corner = ctx.waypoint(ctx.i);
    let proj_cur = ctx.projection(x, ctx.i);
    let proj_prev = ctx.projection(x, ctx.i - 1);
    (proj_cur - corner).norm() < ctx.params.r_switch
        && (proj_prev - corner).norm() < ctx.params.r_switch
}

/// Advances the segment index by at most one when `x` is inside the switch
/// radius of the segment's far waypoint. Never decreases, never passes the
/// final segment.
pub fn advance_segment(x: Vec2, ctx: &TrackingContext) -> usize {
    let last_segment = ctx.path.len() - 2;
    if ctx.i < last_segment && (x - ctx.waypoint(ctx.i + 1)).norm() < ctx.params.r_switch {
        ctx.i + 1
    } else {
        ctx.i
    }
}

/// Point the tracking factor pulls toward. While transitioning a corner the
/// pull blends the two adjacent segments; otherwise it is the line projection
/// advanced along the segment in proportion to current speed, which keeps the
/// correction from being purely perpendicular.
pub fn tracking_measurement_point(state: &RobotState, ctx: &TrackingContext) -> Vec2 {
    let proj_cur = ctx.projection(state.pos, ctx.i);
    if transition_condition(state.pos, ctx) {
        let proj_prev = ctx.projection(state.pos, ctx.i - 1);
        state.pos + 0.5 * ((proj_cur - state.pos) - (proj_prev - state.pos))
    } else {
        let dir = (ctx.waypoint(ctx.i + 1) - ctx.waypoint(ctx.i)).normalize();
        proj_cur + dir * (state.vel.norm() / ctx.params.s_v)
    }
}

/// Scaled, clamped distance to the measurement point: 0 on-path, saturating at
/// 1 once the distance reaches `d_a`. The observed value is always z = 0.
pub fn tracking_h(state: &RobotState, ctx: &TrackingContext) -> f64 {
    let x_meas = tracking_measurement_point(state, ctx);
    ((state.pos - x_meas).norm() / ctx.params.d_a).min(1.0)
}

/// Steering row of the tracking factor, zero-padded over the velocity entries.
/// In the unclamped regime its position part is d_a times the unit vector
/// toward the measurement point. Returns None when the variable is close enough
/// to the path that the 1/h scaling would be singular (no correction needed).
pub fn tracking_jacobian(state: &RobotState, ctx: &TrackingContext) -> Option<RowSVector<f64, 4>> {
    let x_meas = tracking_measurement_point(state, ctx);
    let h = ((state.pos - x_meas).norm() / ctx.params.d_a).min(1.0);
    if h < TRACKING_H_MIN {
        return None;
    }
    let pull = x_meas - state.pos;
    Some(RowSVector::<f64, 4>::from([pull.x / h, pull.y / h, 0.0, 0.0]))
}

/// Residual and Jacobian row in the linearized-factor convention, where the
/// Gauss-Newton step x₀ − (h/‖J‖²)Jᵀ must move toward the measurement point.
/// The published steering row points toward the target and is scaled by 1/h, so
/// its negation is the row consistent with driving the residual h to z = 0.
pub(crate) fn tracking_message_row(
    state: &RobotState,
    ctx: &TrackingContext,
) -> Option<(f64, RowSVector<f64, 4>)> {
    let h = tracking_h(state, ctx);
    tracking_jacobian(state, ctx).map(|row| (h, -row))
}

// ---------------------------------------------------------------------------
// Pose
// ---------------------------------------------------------------------------

/// Pose anchor: h(x) = x, observed value the anchored state.
pub fn pose_h(x: &Vector4<f64>) -> Vector4<f64> {
    *x
}

pub fn pose_jacobian() -> Matrix4<f64> {
    Matrix4::identity()
}

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

/// Constant-velocity transition over one horizon interval.
pub fn dynamics_transition(dt: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

/// h over the stacked pair (x_k, x_{k+1}): the transition defect x_{k+1} − F·x_k.
pub fn dynamics_h(x_k: &Vector4<f64>, x_k1: &Vector4<f64>, dt: f64) -> Vector4<f64> {
    x_k1 - dynamics_transition(dt) * x_k
}

/// Jacobian [−F | I] over the stacked pair.
pub fn dynamics_jacobian(dt: f64) -> SMatrix<f64, 4, 8> {
    let mut j = SMatrix::<f64, 4, 8>::zeros();
    j.view_mut((0, 0), (4, 4)).copy_from(&(-dynamics_transition(dt)));
    j.view_mut((0, 4), (4, 4)).copy_from(&Matrix4::identity());
    j
}

// ---------------------------------------------------------------------------
// Obstacle
// ---------------------------------------------------------------------------

/// Obstacle proximity: 0 with at least `d_o` clearance, rising linearly to 1 at
/// the obstacle surface and staying 1 inside.
pub fn obstacle_h(pos: Vec2, sdf: &SdfGrid, d_o: f64) -> f64 {
    1.0 - (sdf.sample(pos) / d_o).clamp(0.0, 1.0)
}

/// Central finite differences of `obstacle_h` over the position entries, with
/// step half an SDF cell; the field is velocity-independent, so those entries are 0.
pub fn obstacle_jacobian(pos: Vec2, sdf: &SdfGrid, d_o: f64) -> RowSVector<f64, 4> {
    let step = sdf.cell_size() / 2.0;
    let dx = (obstacle_h(pos + Vec2::new(step, 0.0), sdf, d_o)
        - obstacle_h(pos - Vec2::new(step, 0.0), sdf, d_o))
        / (2.0 * step);
    let dy = (obstacle_h(pos + Vec2::new(0.0, step), sdf, d_o)
        - obstacle_h(pos - Vec2::new(0.0, step), sdf, d_o))
        / (2.0 * step);
    RowSVector::<f64, 4>::from([dx, dy, 0.0, 0.0])
}

// ---------------------------------------------------------------------------
// Inter-robot
// ---------------------------------------------------------------------------

/// Inter-robot proximity: a hinge ramp that is 0 at separation ≥ d_i and 1 at
/// zero separation.
pub fn interrobot_h(pos_a: Vec2, pos_b: Vec2, d_i: f64) -> f64 {
    (1.0 - (pos_a - pos_b).norm() / d_i).max(0.0)
}

/// Chain-rule Jacobian over the stacked pair (x_a, x_b); zero everywhere once
/// the hinge is inactive or the positions coincide (no defined direction).
pub fn interrobot_jacobian(pos_a: Vec2, pos_b: Vec2, d_i: f64) -> RowSVector<f64, 8> {
    let delta = pos_a - pos_b;
    let r = delta.norm();
    if r >= d_i || r <= 1e-12 {
        return RowSVector::zeros();
    }
    let g = delta / (r * d_i);
    RowSVector::<f64, 8>::from([-g.x, -g.y, 0.0, 0.0, g.x, g.y, 0.0, 0.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Bounds, Environment, Obstacle};
    use crate::planners::PathSource;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn straight_path() -> GlobalPath {
        GlobalPath::new(vec![Vec2::zeros(), Vec2::new(10.0, 0.0)], PathSource::Manual).unwrap()
    }

    fn l_path() -> GlobalPath {
        GlobalPath::new(
            vec![Vec2::zeros(), Vec2::new(10.0, 0.0), Vec2::new(10.0, 10.0)],
            PathSource::Manual,
        )
        .unwrap()
    }

    fn params(r_switch: f64, s_v: f64, d_a: f64) -> TrackingParams {
        TrackingParams { r_switch, s_v, d_a }
    }

    #[test]
    fn projection_drops_perpendicular() {
        let p = project_onto_line(Vec2::new(3.0, 5.0), Vec2::zeros(), Vec2::new(10.0, 0.0));
        assert_eq!(p.unwrap(), Vec2::new(3.0, 0.0));
    }

    #[test]
    fn projection_is_idempotent_on_line() {
        let x = Vec2::new(7.5, 0.0);
        let p = project_onto_line(x, Vec2::zeros(), Vec2::new(10.0, 0.0)).unwrap();
        assert_eq!(p, x);
    }

    #[test]
    fn projection_is_unclamped() {
        let p = project_onto_line(Vec2::new(-2.0, 3.0), Vec2::zeros(), Vec2::new(10.0, 0.0));
        assert_eq!(p.unwrap(), Vec2::new(-2.0, 0.0));
    }

    #[test]
    fn projection_rejects_degenerate_segment() {
        let p = project_onto_line(Vec2::new(1.0, 1.0), Vec2::zeros(), Vec2::zeros());
        assert_eq!(p.unwrap_err(), FactorError::DegenerateSegment);
    }

    #[test]
    fn context_validates_index_and_params() {
        let path = l_path();
        assert!(TrackingContext::new(&path, 1, params(2.0, 5.0, 4.0)).is_ok());
        assert!(TrackingContext::new(&path, 2, params(2.0, 5.0, 4.0)).is_err());
        assert!(TrackingContext::new(&path, 0, params(0.0, 5.0, 4.0)).is_err());
    }

    #[test]
    fn transition_false_on_first_segment() {
        let path = l_path();
        let ctx = TrackingContext::new(&path, 0, params(2.0, 5.0, 4.0)).unwrap();
        assert!(!transition_condition(Vec2::new(0.1, 0.1), &ctx));
    }

    #[test]
    fn transition_true_at_exact_corner() {
        let path = l_path();
        let ctx = TrackingContext::new(&path, 1, params(2.0, 5.0, 4.0)).unwrap();
        assert!(transition_condition(Vec2::new(10.0, 0.0), &ctx));
    }

    #[test]
    fn transition_false_far_along_segment() {
        let path = l_path();
        let ctx = TrackingContext::new(&path, 1, params(2.0, 5.0, 4.0)).unwrap();
        assert!(!transition_condition(Vec2::new(10.0, 8.0), &ctx));
    }

    #[test]
    fn transition_near_corner_both_projections_close() {
        let path = l_path();
        let ctx = TrackingContext::new(&path, 1, params(2.0, 5.0, 4.0)).unwrap();
        // Projections land at (10, 0.5) and (9.5, 0): both within 2 m of (10, 0).
        assert!(transition_condition(Vec2::new(9.5, 0.5), &ctx));
    }

    #[test]
    fn advance_respects_radius_and_terminal_segment() {
        let path = l_path();
        let p = params(2.0, 5.0, 4.0);
        let ctx0 = TrackingContext::new(&path, 0, p).unwrap();
        assert_eq!(advance_segment(Vec2::new(7.9, 0.0), &ctx0), 0); // 2.1 m out
        assert_eq!(advance_segment(Vec2::new(8.5, 0.0), &ctx0), 1);
        let ctx1 = TrackingContext::new(&path, 1, p).unwrap();
        assert_eq!(advance_segment(Vec2::new(10.0, 10.0), &ctx1), 1); // final segment
    }

    #[test]
    fn measurement_point_zero_velocity_is_projection() {
        let path = straight_path();
        let ctx = TrackingContext::new(&path, 0, params(2.0, 5.0, 4.0)).unwrap();
        let state = RobotState::new(Vec2::new(3.0, 4.0), Vec2::zeros());
        assert_eq!(tracking_measurement_point(&state, &ctx), Vec2::new(3.0, 0.0));
    }

    #[test]
    fn measurement_point_advances_with_speed() {
        let path = straight_path();
        let ctx = TrackingContext::new(&path, 0, params(2.0, 5.0, 4.0)).unwrap();
        let state = RobotState::new(Vec2::new(3.0, 4.0), Vec2::new(0.0, 5.0));
        assert_eq!(tracking_measurement_point(&state, &ctx), Vec2::new(4.0, 0.0));
    }

    #[test]
    fn measurement_point_at_exact_corner_is_position() {
        let path = l_path();
        let ctx = TrackingContext::new(&path, 1, params(2.0, 5.0, 4.0)).unwrap();
        let state = RobotState::new(Vec2::new(10.0, 0.0), Vec2::new(3.0, 3.0));
        // Both projections coincide at the corner, so the blend cancels.
        let m = tracking_measurement_point(&state, &ctx);
        assert_relative_eq!(m.x, 10.0, epsilon = 1e-12);
        assert_relative_eq!(m.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn tracking_h_linear_then_clamped() {
        let path = straight_path();
        let ctx = TrackingContext::new(&path, 0, params(2.0, 5.0, 4.0)).unwrap();
        let on_path = RobotState::new(Vec2::new(5.0, 0.0), Vec2::zeros());
        assert_eq!(tracking_h(&on_path, &ctx), 0.0);
        let half = RobotState::new(Vec2::new(5.0, 2.0), Vec2::zeros());
        assert_relative_eq!(tracking_h(&half, &ctx), 0.5, epsilon = 1e-12);
        let far = RobotState::new(Vec2::new(5.0, 40.0), Vec2::zeros());
        assert_eq!(tracking_h(&far, &ctx), 1.0);
    }

    #[test]
    fn tracking_jacobian_clamped_example() {
        let path = straight_path();
        let ctx = TrackingContext::new(&path, 0, params(2.0, 5.0, 4.0)).unwrap();
        let state = RobotState::new(Vec2::new(3.0, 4.0), Vec2::zeros());
        let j = tracking_jacobian(&state, &ctx).unwrap();
        assert_relative_eq!(j[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(j[1], -4.0, epsilon = 1e-12);
        assert_eq!(j[2], 0.0);
        assert_eq!(j[3], 0.0);
    }

    #[test]
    fn tracking_jacobian_norm_is_attraction_distance_when_unclamped() {
        let path = straight_path();
        let ctx = TrackingContext::new(&path, 0, params(2.0, 5.0, 4.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            // Keep the distance inside (0, d_a) so the clamp is inactive.
            let state = RobotState::new(
                Vec2::new(rng.gen_range(0.0..10.0), rng.gen_range(0.3..3.7)),
                Vec2::zeros(),
            );
            let j = tracking_jacobian(&state, &ctx).unwrap();
            let norm = (j[0] * j[0] + j[1] * j[1]).sqrt();
            assert_relative_eq!(norm, 4.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn tracking_jacobian_vacuous_on_path() {
        let path = straight_path();
        let ctx = TrackingContext::new(&path, 0, params(2.0, 5.0, 4.0)).unwrap();
        let state = RobotState::new(Vec2::new(5.0, 1e-9), Vec2::zeros());
        assert!(tracking_jacobian(&state, &ctx).is_none());
        assert!(tracking_message_row(&state, &ctx).is_none());
    }

    /// Central finite differences of tracking_h over position, step 1e-6.
    fn fd_grad_tracking(state: &RobotState, ctx: &TrackingContext) -> Vec2 {
        let e = 1e-6;
        let h = |p: Vec2| tracking_h(&RobotState::new(p, state.vel), ctx);
        Vec2::new(
            (h(state.pos + Vec2::new(e, 0.0)) - h(state.pos - Vec2::new(e, 0.0))) / (2.0 * e),
            (h(state.pos + Vec2::new(0.0, e)) - h(state.pos - Vec2::new(0.0, e))) / (2.0 * e),
        )
    }

    #[test]
    fn tracking_steering_row_opposes_residual_gradient() {
        // The steering row is anti-parallel to ∇h with norm ratio d_a² in the
        // unclamped regime, which is exactly why the message assembly negates it.
        let path = straight_path();
        let d_a = 4.0;
        let ctx = TrackingContext::new(&path, 0, params(2.0, 5.0, d_a)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 200 {
            let state = RobotState::new(
                Vec2::new(rng.gen_range(0.0..10.0), rng.gen_range(-3.7..3.7)),
                Vec2::zeros(),
            );
            let dist = state.pos.y.abs();
            if dist < 0.2 || dist > 3.6 {
                continue; // stay clear of the h_min guard and the clamp boundary
            }
            let j = tracking_jacobian(&state, &ctx).unwrap();
            let grad = fd_grad_tracking(&state, &ctx);
            let scaled = -Vec2::new(j[0], j[1]) / (d_a * d_a);
            assert_relative_eq!(scaled.x, grad.x, max_relative = 1e-4, epsilon = 1e-9);
            assert_relative_eq!(scaled.y, grad.y, max_relative = 1e-4, epsilon = 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn dynamics_consistent_pair_has_zero_residual() {
        let dt = 0.5;
        let xk = Vector4::new(0.0, 0.0, 1.0, 0.0);
        let xk1 = Vector4::new(dt, 0.0, 1.0, 0.0);
        assert_eq!(dynamics_h(&xk, &xk1, dt), Vector4::zeros());
    }

    #[test]
    fn dynamics_jacobian_matches_finite_differences() {
        let dt = 0.37;
        let j = dynamics_jacobian(dt);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = 1e-6;
        for _ in 0..200 {
            let mut stacked = [0.0; 8];
            for s in stacked.iter_mut() {
                *s = rng.gen_range(-5.0..5.0);
            }
            for col in 0..8 {
                let mut plus = stacked;
                let mut minus = stacked;
                plus[col] += e;
                minus[col] -= e;
                let h_at = |s: &[f64; 8]| {
                    dynamics_h(
                        &Vector4::new(s[0], s[1], s[2], s[3]),
                        &Vector4::new(s[4], s[5], s[6], s[7]),
                        dt,
                    )
                };
                let fd = (h_at(&plus) - h_at(&minus)) / (2.0 * e);
                for row in 0..4 {
                    assert_relative_eq!(j[(row, col)], fd[row], max_relative = 1e-4, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn pose_is_identity() {
        let x = Vector4::new(1.0, -2.0, 3.0, -4.0);
        assert_eq!(pose_h(&x), x);
        assert_eq!(pose_jacobian(), Matrix4::identity());
    }

    #[test]
    fn interrobot_ramp_values() {
        let d_i = 10.0;
        assert_eq!(interrobot_h(Vec2::zeros(), Vec2::new(10.0, 0.0), d_i), 0.0);
        assert_relative_eq!(
            interrobot_h(Vec2::zeros(), Vec2::new(5.0, 0.0), d_i),
            0.5,
            epsilon = 1e-12
        );
        assert_eq!(interrobot_h(Vec2::zeros(), Vec2::new(25.0, 0.0), d_i), 0.0);
    }

    #[test]
    fn interrobot_jacobian_matches_finite_differences() {
        let d_i = 10.0;
        let e = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 200 {
            let a = Vec2::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0));
            let b = Vec2::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0));
            let r = (a - b).norm();
            if r < 0.5 || (r - d_i).abs() < 2.0 * e * 10.0 {
                continue; // avoid the coincident guard and hinge corner
            }
            let j = interrobot_jacobian(a, b, d_i);
            let coords = [a.x, a.y, b.x, b.y];
            for (col, jcol) in [(0usize, 0usize), (1, 1), (2, 4), (3, 5)] {
                let mut plus = coords;
                let mut minus = coords;
                plus[col] += e;
                minus[col] -= e;
                let h_at = |c: &[f64; 4]| {
                    interrobot_h(Vec2::new(c[0], c[1]), Vec2::new(c[2], c[3]), d_i)
                };
                let fd = (h_at(&plus) - h_at(&minus)) / (2.0 * e);
                assert_relative_eq!(j[jcol], fd, max_relative = 1e-4, epsilon = 1e-9);
            }
            // Velocity entries stay zero.
            assert_eq!(j[2], 0.0);
            assert_eq!(j[3], 0.0);
            assert_eq!(j[6], 0.0);
            assert_eq!(j[7], 0.0);
            checked += 1;
        }
    }

    fn circle_env() -> Environment {
        Environment::new(
            Bounds {
                min: Vec2::new(-20.0, -20.0),
                max: Vec2::new(20.0, 20.0),
            },
            vec![Obstacle::Circle {
                center: Vec2::zeros(),
                radius: 3.0,
            }],
            None,
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn obstacle_free_space_is_inert() {
        let env = circle_env();
        let p = Vec2::new(10.0, 0.0); // sdf = 7, far beyond d_o = 2
        assert_eq!(obstacle_h(p, &env.sdf, 2.0), 0.0);
        assert_eq!(obstacle_jacobian(p, &env.sdf, 2.0), RowSVector::<f64, 4>::zeros());
    }

    #[test]
    fn obstacle_ramp_midpoint_and_interior() {
        let env = circle_env();
        let d_o = 2.0;
        // One ramp-width out from the surface: sdf ≈ 1 = d_o/2 → h ≈ 0.5.
        let h_mid = obstacle_h(Vec2::new(4.0, 0.0), &env.sdf, d_o);
        assert_relative_eq!(h_mid, 0.5, epsilon = 0.15);
        // Deep inside: saturated.
        assert_eq!(obstacle_h(Vec2::new(0.0, 0.0), &env.sdf, d_o), 1.0);
    }

    #[test]
    fn obstacle_jacobian_matches_stencil_oracle() {
        let env = circle_env();
        let d_o = 2.0;
        let step = env.sdf.cell_size() / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let p = Vec2::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
            let j = obstacle_jacobian(p, &env.sdf, d_o);
            // Independent restatement of the symmetric-difference definition.
            let f = |q: Vec2| 1.0 - (env.sdf.sample(q) / d_o).clamp(0.0, 1.0);
            let gx = (f(p + Vec2::new(step, 0.0)) - f(p - Vec2::new(step, 0.0))) / (2.0 * step);
            let gy = (f(p + Vec2::new(0.0, step)) - f(p - Vec2::new(0.0, step))) / (2.0 * step);
            assert_relative_eq!(j[0], gx, epsilon = 1e-12);
            assert_relative_eq!(j[1], gy, epsilon = 1e-12);
        }
    }

    #[test]
    fn obstacle_gradient_points_away_from_surface_in_ramp() {
        let env = circle_env();
        let d_o = 2.0;
        // In the ramp zone east of the circle, h decreases with x: ∂h/∂x < 0.
        let j = obstacle_jacobian(Vec2::new(4.0, 0.0), &env.sdf, d_o);
        assert!(j[0] < 0.0, "gradient {j:?}");
    }

    proptest! {
        #[test]
        fn tracking_h_stays_in_unit_interval(
            x in -50.0..50.0f64,
            y in -50.0..50.0f64,
            vx in -10.0..10.0f64,
            vy in -10.0..10.0f64,
        ) {
            let path = straight_path();
            let ctx = TrackingContext::new(&path, 0, params(2.0, 5.0, 4.0)).unwrap();
            let h = tracking_h(&RobotState::new(Vec2::new(x, y), Vec2::new(vx, vy)), &ctx);
            prop_assert!((0.0..=1.0).contains(&h));
        }

        #[test]
        fn tracking_h_lipschitz_in_position(
            x1 in 0.0..10.0f64, y1 in -3.5..3.5f64,
            x2 in 0.0..10.0f64, y2 in -3.5..3.5f64,
            speed in 0.0..10.0f64,
        ) {
            // Same context and velocity: |Δh| ≤ ‖Δpos‖ / d_a in the unclamped band.
            let path = straight_path();
            let d_a = 4.0;
            let ctx = TrackingContext::new(&path, 0, params(2.0, 5.0, d_a)).unwrap();
            let vel = Vec2::new(speed, 0.0);
            let h1 = tracking_h(&RobotState::new(Vec2::new(x1, y1), vel), &ctx);
            let h2 = tracking_h(&RobotState::new(Vec2::new(x2, y2), vel), &ctx);
            let dist = (Vec2::new(x1, y1) - Vec2::new(x2, y2)).norm();
            prop_assert!((h1 - h2).abs() <= dist / d_a + 1e-9);
        }

        #[test]
        fn advance_never_decreases(
            x in -20.0..20.0f64,
            y in -20.0..20.0f64,
            i in 0usize..2,
        ) {
            let path = GlobalPath::new(
                vec![Vec2::zeros(), Vec2::new(10.0, 0.0), Vec2::new(10.0, 10.0), Vec2::new(0.0, 10.0)],
                PathSource::Manual,
            ).unwrap();
            let ctx = TrackingContext::new(&path, i, params(2.0, 5.0, 4.0)).unwrap();
            let next = advance_segment(Vec2::new(x, y), &ctx);
            prop_assert!(next >= i && next <= i + 1);
            prop_assert!(next <= path.len() - 2);
        }

        #[test]
        fn interrobot_h_symmetric(
            ax in -10.0..10.0f64, ay in -10.0..10.0f64,
            bx in -10.0..10.0f64, by in -10.0..10.0f64,
        ) {
            let a = Vec2::new(ax, ay);
            let b = Vec2::new(bx, by);
            prop_assert_eq!(interrobot_h(a, b, 10.0), interrobot_h(b, a, 10.0));
        }
    }
}
