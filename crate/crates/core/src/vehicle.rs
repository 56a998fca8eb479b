//! Rear-axle bicycle kinematics with first-order actuator lag, and the
//! propulsion/steering encoders.

use std::f64::consts::TAU;

use serde::Deserialize;

use crate::geom::Pose2D;

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub max_speed: f64,
    pub max_steer: f64,
    /// Speed lag time constant; zero disables the lag.
    pub speed_tau: f64,
    /// Steering lag time constant; zero disables the lag.
    pub steer_tau: f64,
    pub ticks_per_rev: u32,
    pub wheel_radius: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 1.0,
            max_speed: 2.0,
            max_steer: 0.7,
            speed_tau: 0.2,
            steer_tau: 0.1,
            ticks_per_rev: 1024,
            wheel_radius: 0.15,
        }
    }
}

impl VehicleParams {
    pub fn without_lag(self) -> Self {
        Self {
            speed_tau: 0.0,
            steer_tau: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("wheelbase", self.wheelbase),
            ("max_speed", self.max_speed),
            ("max_steer", self.max_steer),
            ("wheel_radius", self.wheel_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("vehicle.{name} must be positive, got {v}"));
            }
        }
        if self.max_steer >= std::f64::consts::FRAC_PI_2 {
            return Err(format!("vehicle.max_steer must be below pi/2, got {}", self.max_steer));
        }
        if self.speed_tau < 0.0 || self.steer_tau < 0.0 {
            return Err("vehicle lag constants must be non-negative".into());
        }
        if self.ticks_per_rev == 0 {
            return Err("vehicle.ticks_per_rev must be positive".into());
        }
        Ok(())
    }

    /// Curvature-to-steering map of the bicycle model.
    pub fn steer_for_curvature(&self, curvature: f64) -> f64 {
        (curvature * self.wheelbase)
            .atan()
            .clamp(-self.max_steer, self.max_steer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleState {
    /// Rear-axle frame in the map frame.
    pub pose: Pose2D,
    pub speed: f64,
    pub steer: f64,
    /// Total drive-wheel rotation since start.
    pub cum_drive_angle: f64,
    /// Total steering rotation since start (the steering encoder is zeroed
    /// at straight-ahead).
    pub cum_steer_angle: f64,
}

impl VehicleState {
    pub fn at(pose: Pose2D) -> Self {
        Self {
            pose,
            ..Default::default()
        }
    }

    pub fn yaw_rate(&self, p: &VehicleParams) -> f64 {
        self.speed * self.steer.tan() / p.wheelbase
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActuatorCommand {
    pub speed: f64,
    pub steer: f64,
}

fn relax(current: f64, target: f64, tau: f64, dt: f64) -> f64 {
    if tau <= 0.0 {
        target
    } else {
        current + (target - current) * (1.0 - (-dt / tau).exp())
    }
}

/// Advances the vehicle by `dt`.
///
/// Speed and steering relax toward the setpoints and are clamped to the
/// limits; the pose then takes one explicit step of the bicycle model with
/// the heading evaluated at the middle of the step, which makes the update
/// exactly reversible under negated speed.
pub fn step_bicycle(s: &VehicleState, cmd: &ActuatorCommand, dt: f64, p: &VehicleParams) -> VehicleState {
    debug_assert!(dt > 0.0);
    let speed = relax(s.speed, cmd.speed, p.speed_tau, dt).clamp(-p.max_speed, p.max_speed);
    let steer = relax(s.steer, cmd.steer, p.steer_tau, dt).clamp(-p.max_steer, p.max_steer);
    let dtheta = speed * steer.tan() / p.wheelbase * dt;
    let mid = s.pose.theta + 0.5 * dtheta;
    let pose = Pose2D::new(
        s.pose.x + speed * mid.cos() * dt,
        s.pose.y + speed * mid.sin() * dt,
        s.pose.theta + dtheta,
    );
    VehicleState {
        pose,
        speed,
        steer,
        cum_drive_angle: s.cum_drive_angle + speed * dt / p.wheel_radius,
        cum_steer_angle: s.cum_steer_angle + (steer - s.steer),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EncoderReading {
    pub drive_ticks: i64,
    pub steer_ticks: i64,
    pub stamp: f64,
}

fn ticks(angle: f64, tpr: u32) -> i64 {
    (angle / TAU * tpr as f64).floor() as i64
}

/// Samples both encoders. Ticks derive from the cumulative angles, so
/// quantization never accumulates into lost ticks.
pub fn read_encoders(s: &VehicleState, p: &VehicleParams, stamp: f64) -> EncoderReading {
    EncoderReading {
        drive_ticks: ticks(s.cum_drive_angle, p.ticks_per_rev),
        steer_ticks: ticks(s.cum_steer_angle, p.ticks_per_rev),
        stamp,
    }
}
