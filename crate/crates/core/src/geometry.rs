//! Planar kinematics shared by the simulators, the categorizer and the
//! metrics.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed below which a pedestrian has no defined heading (m/s).
pub const SPEED_EPSILON: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product; positive when `other` lies to the
    /// left of `self`.
    pub fn det(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Unit vector, or zero for the zero vector.
    pub fn normalize_or_zero(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            Vec2::ZERO
        }
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotate(self, radians: f64) -> Vec2 {
        let (s, c) = radians.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl SubAssign for Vec2 {
    fn sub_assign(&mut self, rhs: Vec2) {
        self.x -= rhs.x;
        self.y -= rhs.y;
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    fn mul(self, rhs: Vec2) -> Vec2 {
        rhs * self
    }
}

impl Div<f64> for Vec2 {
    type Output = Vec2;
    fn div(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x / rhs, self.y / rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Position and velocity of one pedestrian at one instant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub position: Vec2,
    pub velocity: Vec2,
}

impl Pose2 {
    pub fn new(position: Vec2, velocity: Vec2) -> Self {
        Pose2 { position, velocity }
    }

    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }

    /// Unit heading, if the pedestrian moves faster than [`SPEED_EPSILON`].
    pub fn heading(&self) -> Option<Vec2> {
        let speed = self.speed();
        (speed > SPEED_EPSILON).then(|| self.velocity / speed)
    }
}

/// Expresses `point` relative to `primary` in the frame whose +x axis is the
/// primary's direction of motion.
pub fn heading_frame(primary: &Pose2, point: Vec2) -> Result<Vec2> {
    let h = primary.heading().ok_or(Error::UndefinedHeading {
        speed: primary.speed(),
    })?;
    let rel = point - primary.position;
    Ok(Vec2::new(rel.dot(h), h.det(rel)))
}

/// Bearing of `point` seen from `primary`, in degrees within (-180, 180].
/// Zero is dead ahead, positive angles are to the left.
pub fn bearing(primary: &Pose2, point: Vec2) -> Result<f64> {
    let local = heading_frame(primary, point)?;
    Ok(wrap_degrees(local.y.atan2(local.x).to_degrees()))
}

/// Signed angle in degrees that rotates `from` onto `to`, within (-180, 180].
pub fn signed_angle(from: Vec2, to: Vec2) -> f64 {
    wrap_degrees(from.det(to).atan2(from.dot(to)).to_degrees())
}

/// Maps any angle in degrees onto (-180, 180].
pub fn wrap_degrees(deg: f64) -> f64 {
    let mut a = deg % 360.0;
    if a <= -180.0 {
        a += 360.0;
    } else if a > 180.0 {
        a -= 360.0;
    }
    a
}

/// Exact minimum distance over `t` in `[0, horizon]` between two points moving
/// with constant velocities.
pub fn segment_min_distance(p1: Vec2, v1: Vec2, p2: Vec2, v2: Vec2, horizon: f64) -> f64 {
    let dp = p2 - p1;
    let dv = v2 - v1;
    let dv2 = dv.norm_squared();
    if dv2 == 0.0 || horizon <= 0.0 {
        return dp.norm();
    }
    let t = (-dp.dot(dv) / dv2).clamp(0.0, horizon);
    (dp + dv * t).norm()
}
