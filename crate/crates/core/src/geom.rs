//! Planar and spatial rigid-body math.
//!
//! Frames follow the usual mobile-robot convention: x forward, y left,
//! z up. A [`Pose2D`] locates the rear-axle frame of the vehicle in the
//! map frame.

use std::f64::consts::{PI, TAU};

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point2 = nalgebra::Point2<f64>;
pub type Point3 = nalgebra::Point3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("angle is not finite: {0}")]
    NonFiniteAngle(f64),
}

/// Wraps `a` into (−π, π]. Non-finite input propagates as NaN.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Checked variant of [`wrap_angle`].
pub fn normalize_angle(a: f64) -> Result<f64, GeomError> {
    if !a.is_finite() {
        return Err(GeomError::NonFiniteAngle(a));
    }
    Ok(wrap_angle(a))
}

/// Signed smallest difference `a - b`, wrapped.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub const IDENTITY: Pose2D = Pose2D {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    /// `self ∘ other`: `other` is expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)
    }

    /// Pose of `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose2D) -> Pose2D {
        self.inverse().compose(other)
    }

    /// Maps a point from this frame into the parent frame.
    pub fn transform_point(&self, p: &Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        Point2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    /// Maps a point from the parent frame into this frame.
    pub fn inverse_transform_point(&self, p: &Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Point2::new(c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn distance_to(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// Composes two planar poses.
pub fn se2_compose(a: &Pose2D, b: &Pose2D) -> Pose2D {
    a.compose(b)
}

/// Planar velocity command: linear speed along body x, yaw rate about body z.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist2D {
    pub v: f64,
    pub omega: f64,
}

impl Twist2D {
    pub const ZERO: Twist2D = Twist2D { v: 0.0, omega: 0.0 };

    pub fn new(v: f64, omega: f64) -> Self {
        debug_assert!(v.is_finite() && omega.is_finite());
        Self { v, omega }
    }

    pub fn is_zero(&self) -> bool {
        self.v == 0.0 && self.omega == 0.0
    }
}

/// Rigid transform between two sensor frames, given as a translation and
/// intrinsic yaw-pitch-roll angles (rotate about z, then the new y, then
/// the new x).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Extrinsics3D {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Extrinsics3D {
    pub fn new(tx: f64, ty: f64, tz: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            tx,
            ty,
            tz,
            roll: wrap_angle(roll),
            pitch: wrap_angle(pitch),
            yaw: wrap_angle(yaw),
        }
    }

    pub fn translation_only(tx: f64, ty: f64, tz: f64) -> Self {
        Self::new(tx, ty, tz, 0.0, 0.0, 0.0)
    }

    /// R = Rz(yaw) · Ry(pitch) · Rx(roll).
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw)
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.tx, self.ty, self.tz)
    }

    fn from_parts(rot: &Rotation3<f64>, t: &Vector3<f64>) -> Self {
        let (roll, pitch, yaw) = rot.euler_angles();
        Self::new(t.x, t.y, t.z, roll, pitch, yaw)
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        self.rotation() * p + self.translation()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().inverse();
        let t = -(rt * self.translation());
        Self::from_parts(&rt, &t)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Extrinsics3D) -> Self {
        let r = self.rotation() * other.rotation();
        let t = self.rotation() * other.translation() + self.translation();
        Self::from_parts(&r, &t)
    }
}

/// Applies an extrinsic calibration to a point.
pub fn transform_point(e: &Extrinsics3D, p: &Point3) -> Point3 {
    e.transform_point(p)
}
