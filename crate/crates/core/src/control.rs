//! Drive and steering PIDs, pure-pursuit path tracking and waypoint
//! missions.

use serde::Deserialize;

use crate::geom::{Point2, Pose2D, Twist2D};
use crate::vehicle::{ActuatorCommand, VehicleParams};

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub out_min: f64,
    pub out_max: f64,
    pub i_min: f64,
    pub i_max: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 1.0,
            ki: 0.0,
            kd: 0.0,
            out_min: -1.0,
            out_max: 1.0,
            i_min: -0.5,
            i_max: 0.5,
        }
    }
}

impl PidGains {
    pub fn speed() -> Self {
        Self {
            kp: 1.2,
            ki: 0.3,
            kd: 0.02,
            ..Self::default()
        }
    }

    pub fn steering() -> Self {
        Self {
            kp: 2.0,
            ki: 0.1,
            kd: 0.05,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.out_min < self.out_max) || !(self.i_min <= self.i_max) {
            return Err("pid clamps must satisfy out_min < out_max and i_min <= i_max".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidController {
    pub gains: PidGains,
    pub i_term: f64,
    pub prev_error: f64,
}

impl PidController {
    pub fn new(gains: PidGains) -> Self {
        Self {
            gains,
            i_term: 0.0,
            prev_error: 0.0,
        }
    }

    pub fn reset(&mut self) {
        self.i_term = 0.0;
        self.prev_error = 0.0;
    }

    /// One controller update; derivative acts on the error.
    pub fn step(&mut self, setpoint: f64, measured: f64, dt: f64) -> f64 {
        debug_assert!(dt > 0.0);
        let g = &self.gains;
        let e = setpoint - measured;
        self.i_term = (self.i_term + g.ki * e * dt).clamp(g.i_min, g.i_max);
        let d = g.kd * (e - self.prev_error) / dt;
        self.prev_error = e;
        (g.kp * e + self.i_term + d).clamp(g.out_min, g.out_max)
    }
}

/// Free-function form of [`PidController::step`].
pub fn pid_step(c: &mut PidController, setpoint: f64, measured: f64, dt: f64) -> f64 {
    c.step(setpoint, measured, dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowLevelConfig {
    pub speed: PidGains,
    pub steering: PidGains,
    /// Speed-setpoint slew at full effort, m/s².
    pub accel_max: f64,
    /// Steering-setpoint slew at full effort, rad/s.
    pub steer_rate_max: f64,
}

impl Default for LowLevelConfig {
    fn default() -> Self {
        Self {
            speed: PidGains::speed(),
            steering: PidGains::steering(),
            accel_max: 2.0,
            steer_rate_max: 1.5,
        }
    }
}

/// Turns a twist setpoint into actuator setpoints: each PID's effort in
/// [-1, 1] slews its actuator setpoint at up to the configured rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowLevelController {
    pub speed_pid: PidController,
    pub steer_pid: PidController,
    pub config: LowLevelConfig,
    pub command: ActuatorCommand,
}

impl LowLevelController {
    pub fn new(config: LowLevelConfig) -> Self {
        Self {
            speed_pid: PidController::new(config.speed),
            steer_pid: PidController::new(config.steering),
            config,
            command: ActuatorCommand::default(),
        }
    }

    /// `measured` holds the current speed and yaw-rate estimates.
    pub fn step(&mut self, setpoint: &Twist2D, measured: &Twist2D, dt: f64, p: &VehicleParams) -> ActuatorCommand {
        let u_v = self.speed_pid.step(setpoint.v, measured.v, dt);
        let u_w = self.steer_pid.step(setpoint.omega, measured.omega, dt);
        let speed = (self.command.speed + u_v * self.config.accel_max * dt).clamp(-p.max_speed, p.max_speed);
        // Yaw rate flips sign with the direction of travel.
        let dir = if setpoint.v < 0.0 { -1.0 } else { 1.0 };
        let steer = (self.command.steer + dir * u_w * self.config.steer_rate_max * dt).clamp(-p.max_steer, p.max_steer);
        self.command = ActuatorCommand { speed, steer };
        if setpoint.is_zero() && measured.v.abs() < 0.05 {
            // Hold still instead of integrating noise around zero.
            self.command.speed = 0.0;
            self.speed_pid.reset();
        }
        self.command
    }

    /// Zero setpoints and controller state, for hard stops.
    pub fn halt(&mut self) -> ActuatorCommand {
        self.speed_pid.reset();
        self.steer_pid.reset();
        self.command = ActuatorCommand {
            speed: 0.0,
            steer: self.command.steer,
        };
        self.command
    }
}

/// Resamples a polyline so consecutive points are at most `step` apart.
pub fn densify(path: &[Point2], step: f64) -> Vec<Point2> {
    let mut out = Vec::new();
    for w in path.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = ((b - a).norm() / step).ceil().max(1.0) as usize;
        for k in 0..n {
            out.push(a + (b - a) * (k as f64 / n as f64));
        }
    }
    if let Some(last) = path.last() {
        out.push(*last);
    }
    out
}

/// Index of the point closest to `p`.
fn closest(points: &[Point2], p: &Point2) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, q) in points.iter().enumerate() {
        let d = (q - p).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Distance from `p` to the polyline.
pub fn cross_track_error(path: &[Point2], p: &Point2) -> f64 {
    if path.len() == 1 {
        return (path[0] - p).norm();
    }
    path.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let ab = b - a;
            let len2 = ab.norm_squared();
            let t = if len2 > 0.0 {
                ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (a + ab * t - p).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Lowest speed commanded while approaching the final point.
const MIN_APPROACH_FRACTION: f64 = 0.2;

/// Pure pursuit on an already densified path.
pub fn pure_pursuit_points(path: &[Point2], pose: &Pose2D, lookahead: f64, cruise: f64) -> Twist2D {
    assert!(!path.is_empty(), "pure pursuit needs a path");
    let here = pose.position();
    let start = closest(path, &here);
    let target = path[start..]
        .iter()
        .find(|q| (*q - here).norm() >= lookahead)
        .copied()
        .unwrap_or(*path.last().expect("non-empty"));
    let local = pose.inverse_transform_point(&target);
    let ld2 = local.coords.norm_squared();
    if ld2 < 1e-12 {
        return Twist2D::ZERO;
    }
    let kappa = 2.0 * local.y / ld2;
    let to_goal = (path[start] - here).norm() + path[start..].windows(2).map(|w| (w[1] - w[0]).norm()).sum::<f64>();
    let v = cruise * (to_goal / lookahead).clamp(MIN_APPROACH_FRACTION, 1.0);
    Twist2D::new(v, kappa * v)
}

/// Pure pursuit along the polyline through `path`'s positions.
pub fn pure_pursuit(path: &[Pose2D], pose: &Pose2D, lookahead: f64, cruise: f64) -> Twist2D {
    let pts: Vec<Point2> = path.iter().map(Pose2D::position).collect();
    pure_pursuit_points(&densify(&pts, 0.1), pose, lookahead, cruise)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissionSpec {
    /// Waypoints as `[x, y]` or `[x, y, theta]`.
    pub waypoints: Vec<Vec<f64>>,
    pub goal_tol_xy: f64,
    /// Heading tolerance checked at the final waypoint only.
    pub goal_tol_theta: f64,
    pub cruise_speed: f64,
    pub lookahead: f64,
}

impl Default for MissionSpec {
    fn default() -> Self {
        Self {
            waypoints: Vec::new(),
            goal_tol_xy: 0.5,
            goal_tol_theta: std::f64::consts::PI,
            cruise_speed: 1.0,
            lookahead: 1.5,
        }
    }
}

impl MissionSpec {
    pub fn build(&self) -> Result<Mission, String> {
        let waypoints = self
            .waypoints
            .iter()
            .enumerate()
            .map(|(i, w)| match w.as_slice() {
                [x, y] => Ok(Pose2D::new(*x, *y, 0.0)),
                [x, y, t] => Ok(Pose2D::new(*x, *y, *t)),
                _ => Err(format!("mission.waypoints[{i}] needs 2 or 3 numbers")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Mission::new(
            waypoints,
            self.goal_tol_xy,
            self.goal_tol_theta,
            self.cruise_speed,
            self.lookahead,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mission {
    pub waypoints: Vec<Pose2D>,
    pub goal_tol_xy: f64,
    pub goal_tol_theta: f64,
    pub cruise_speed: f64,
    pub lookahead: f64,
    active: usize,
    leg_start: Option<Point2>,
    path: Vec<Point2>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissionOutput {
    pub twist: Twist2D,
    /// Index of the waypoint being approached; `None` once done.
    pub active: Option<usize>,
    pub done: bool,
    /// Index of a waypoint reached during this step.
    pub reached: Option<usize>,
}

impl Mission {
    pub fn new(
        waypoints: Vec<Pose2D>,
        goal_tol_xy: f64,
        goal_tol_theta: f64,
        cruise_speed: f64,
        lookahead: f64,
    ) -> Result<Self, String> {
        if waypoints.is_empty() {
            return Err("mission needs at least one waypoint".into());
        }
        if !(goal_tol_xy > 0.0 && goal_tol_theta > 0.0 && lookahead > 0.0) {
            return Err("mission tolerances and lookahead must be positive".into());
        }
        Ok(Self {
            waypoints,
            goal_tol_xy,
            goal_tol_theta,
            cruise_speed,
            lookahead,
            active: 0,
            leg_start: None,
            path: Vec::new(),
        })
    }

    pub fn active(&self) -> Option<usize> {
        (self.active < self.waypoints.len()).then_some(self.active)
    }

    pub fn is_done(&self) -> bool {
        self.active >= self.waypoints.len()
    }

    fn rebuild_path(&mut self) {
        let mut pts = vec![self.leg_start.expect("leg start set")];
        pts.extend(self.waypoints[self.active..].iter().map(Pose2D::position));
        self.path = densify(&pts, 0.1);
    }

    fn reached(&self, i: usize, pose: &Pose2D) -> bool {
        let w = &self.waypoints[i];
        let close = w.distance_to(pose) <= self.goal_tol_xy;
        if i + 1 == self.waypoints.len() {
            close && crate::geom::angle_diff(pose.theta, w.theta).abs() <= self.goal_tol_theta
        } else {
            close
        }
    }

    pub fn step(&mut self, pose: &Pose2D) -> MissionOutput {
        if self.leg_start.is_none() {
            self.leg_start = Some(pose.position());
            self.rebuild_path();
        }
        let mut reached = None;
        while self.active < self.waypoints.len() && self.reached(self.active, pose) {
            reached = Some(self.active);
            self.leg_start = Some(self.waypoints[self.active].position());
            self.active += 1;
            if self.active < self.waypoints.len() {
                self.rebuild_path();
            }
        }
        if self.is_done() {
            return MissionOutput {
                twist: Twist2D::ZERO,
                active: None,
                done: true,
                reached,
            };
        }
        MissionOutput {
            twist: pure_pursuit_points(&self.path, pose, self.lookahead, self.cruise_speed),
            active: Some(self.active),
            done: false,
            reached,
        }
    }
}

/// Free-function form of [`Mission::step`].
pub fn mission_step(m: &mut Mission, pose: &Pose2D) -> MissionOutput {
    m.step(pose)
}
