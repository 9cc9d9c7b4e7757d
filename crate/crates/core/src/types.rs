//! Shared planar state types.

use nalgebra::{DVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

pub type Vec2 = Vector2<f64>;

/// Dimension of one planning variable: [x, y, vx, vy].
pub const STATE_DIM: usize = 4;

/// Planar position + velocity state of one robot or horizon variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pos: Vec2,
    pub vel: Vec2,
}

impl RobotState {
    pub fn new(pos: Vec2, vel: Vec2) -> Self {
        Self { pos, vel }
    }

    pub fn stationary(pos: Vec2) -> Self {
        Self {
            pos,
            vel: Vec2::zeros(),
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.pos.x, self.pos.y, self.vel.x, self.vel.y])
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        debug_assert_eq!(v.len(), STATE_DIM);
        Self {
            pos: Vec2::new(v[0], v[1]),
            vel: Vec2::new(v[2], v[3]),
        }
    }

    pub fn to_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.pos.x, self.pos.y, self.vel.x, self.vel.y)
    }

    pub fn from_vector4(v: &Vector4<f64>) -> Self {
        Self {
            pos: Vec2::new(v[0], v[1]),
            vel: Vec2::new(v[2], v[3]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pos.iter().chain(self.vel.iter()).all(|v| v.is_finite())
    }
}
