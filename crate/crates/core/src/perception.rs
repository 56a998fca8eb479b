//! Detection records, class filtering, projection into the map frame and
//! the forward stop gate. Scripted actors stand in for a detector in
//! simulation.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Extrinsics3D, Point2, Point3, Pose2D, Twist2D};
use crate::world::World2D;

pub const DEFAULT_CLASSES: [&str; 6] = ["person", "dog", "cat", "duck", "scooter", "bicyclist"];

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("detection has no depth")]
    MissingDepth,
    #[error("detection log line {line}: {msg}")]
    Log { line: u64, msg: String },
    #[error("detection log: {0}")]
    Io(#[from] std::io::Error),
}

/// One detector output. `(u, v)` is the top-left bbox corner in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub stamp: f64,
    pub class_name: String,
    pub confidence: f64,
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub h: f64,
    pub depth: Option<f64>,
}

impl Detection {
    pub fn center(&self) -> (f64, f64) {
        (self.u + 0.5 * self.w, self.v + 0.5 * self.h)
    }

    fn check(&self) -> Result<(), String> {
        if !self.stamp.is_finite() {
            return Err("stamp must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        if ![self.u, self.v, self.w, self.h].iter().all(|x| x.is_finite()) || self.w < 0.0 || self.h < 0.0 {
            return Err("bbox must be finite with non-negative size".into());
        }
        match self.depth {
            Some(d) if !(d > 0.0 && d.is_finite()) => Err(format!("depth {d} must be positive")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObstaclePoint {
    pub position: Point2,
    pub class_name: String,
    pub stamp: f64,
}

/// Case-insensitive set of class names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassWhitelist(BTreeSet<String>);

impl ClassWhitelist {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self(names.into_iter().map(|s| s.as_ref().trim().to_lowercase()).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(&name.trim().to_lowercase())
    }
}

impl Default for ClassWhitelist {
    fn default() -> Self {
        Self::new(DEFAULT_CLASSES)
    }
}

pub fn filter_classes(dets: &[Detection], whitelist: &ClassWhitelist, min_conf: f64) -> Vec<Detection> {
    dets.iter()
        .filter(|d| whitelist.contains(&d.class_name) && d.confidence >= min_conf)
        .cloned()
        .collect()
}

/// Pinhole intrinsics. The camera frame has x along the optical axis,
/// y to the left and z up, so it lines up with the body frame when the
/// extrinsics are identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        // 640x480 with an 87 degree horizontal field of view.
        Self {
            fx: 337.2,
            fy: 337.2,
            cx: 320.0,
            cy: 240.0,
        }
    }
}

impl CameraIntrinsics {
    /// Camera-frame point for pixel `(u, v)` at optical-axis depth `depth`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Point3 {
        Point3::new(
            depth,
            -(u - self.cx) * depth / self.fx,
            -(v - self.cy) * depth / self.fy,
        )
    }

    /// Pixel and depth of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Point3) -> Option<(f64, f64, f64)> {
        (p.x > 0.0).then(|| (self.cx - self.fx * p.y / p.x, self.cy - self.fy * p.z / p.x, p.x))
    }
}

pub fn project_obstacle(
    d: &Detection,
    cam: &CameraIntrinsics,
    cam_to_base: &Extrinsics3D,
    base_pose: &Pose2D,
) -> Result<ObstaclePoint, PerceptionError> {
    let depth = d.depth.ok_or(PerceptionError::MissingDepth)?;
    let (u, v) = d.center();
    let in_base = cam_to_base.transform_point(&cam.back_project(u, v, depth));
    Ok(ObstaclePoint {
        position: base_pose.transform_point(&Point2::new(in_base.x, in_base.y)),
        class_name: d.class_name.clone(),
        stamp: d.stamp,
    })
}

/// True when `p` lies in the body-frame box `[0, stop_dist] x [-hw, hw]`.
pub fn in_stop_zone(p: &Point2, pose: &Pose2D, stop_dist: f64, corridor_halfwidth: f64) -> bool {
    let b = pose.inverse_transform_point(p);
    (0.0..=stop_dist).contains(&b.x) && b.y.abs() <= corridor_halfwidth
}

pub fn safety_gate(
    obstacles: &[ObstaclePoint],
    pose: &Pose2D,
    cmd: Twist2D,
    stop_dist: f64,
    corridor_halfwidth: f64,
) -> Twist2D {
    debug_assert!(stop_dist > 0.0);
    if obstacles
        .iter()
        .any(|o| in_stop_zone(&o.position, pose, stop_dist, corridor_halfwidth))
    {
        Twist2D::ZERO
    } else {
        cmd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyConfig {
    pub stop_dist: f64,
    pub corridor_halfwidth: f64,
    pub min_conf: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            stop_dist: 2.0,
            corridor_halfwidth: 0.6,
            min_conf: 0.5,
        }
    }
}

/// Reads a `stamp,class_name,confidence,u,v,w,h,depth` log.
pub fn read_detections<R: Read>(r: R) -> Result<Vec<Detection>, PerceptionError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rd.headers().map_err(|e| log_err(&e, 1))?.clone();
    let expected = ["stamp", "class_name", "confidence", "u", "v", "w", "h", "depth"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(PerceptionError::Log {
            line: 1,
            msg: format!("expected header {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rd.deserialize::<Detection>() {
        let d = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            log_err(&e, line)
        })?;
        d.check().map_err(|msg| PerceptionError::Log {
            line: out.len() as u64 + 2,
            msg,
        })?;
        out.push(d);
    }
    Ok(out)
}

fn log_err(e: &csv::Error, line: u64) -> PerceptionError {
    PerceptionError::Log {
        line,
        msg: e.to_string(),
    }
}

pub fn write_detections<W: Write>(w: W, dets: &[Detection]) -> Result<(), PerceptionError> {
    let mut wr = csv::Writer::from_writer(w);
    for d in dets {
        wr.serialize(d).map_err(|e| log_err(&e, 0))?;
    }
    if dets.is_empty() {
        wr.write_record(["stamp", "class_name", "confidence", "u", "v", "w", "h", "depth"])
            .map_err(|e| log_err(&e, 0))?;
    }
    wr.flush()?;
    Ok(())
}

/// A point actor walking back and forth along a polyline.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedActor {
    #[serde(default = "default_class")]
    pub class_name: String,
    pub path: Vec<[f64; 2]>,
    pub speed: f64,
    /// Seconds of travel already done at t = 0.
    #[serde(default)]
    pub phase: f64,
}

fn default_class() -> String {
    "person".into()
}

impl ScriptedActor {
    pub fn validate(&self) -> Result<(), String> {
        if self.path.is_empty() {
            return Err("actor path is empty".into());
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return Err("actor speed must be non-negative".into());
        }
        Ok(())
    }

    pub fn position_at(&self, t: f64) -> Point2 {
        let pts: Vec<Point2> = self.path.iter().map(|p| Point2::new(p[0], p[1])).collect();
        let lens: Vec<f64> = pts.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
        let total: f64 = lens.iter().sum();
        if total == 0.0 {
            return pts[0];
        }
        let mut s = (self.speed * (t + self.phase)).rem_euclid(2.0 * total);
        if s > total {
            s = 2.0 * total - s;
        }
        for (w, len) in pts.windows(2).zip(&lens) {
            if s <= *len {
                return if *len > 0.0 {
                    w[0] + (w[1] - w[0]) * (s / len)
                } else {
                    w[0]
                };
            }
            s -= len;
        }
        *pts.last().expect("non-empty path")
    }
}

/// Camera model used to render actors as ideal detections.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub intrinsics: CameraIntrinsics,
    pub width: f64,
    pub height: f64,
    pub cam_to_base: Extrinsics3D,
    pub max_depth: f64,
    /// Rendered physical actor size, meters.
    pub actor_width: f64,
    pub actor_height: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            width: 640.0,
            height: 480.0,
            // Mast behind the rear axle so the field of view covers the
            // whole default stop zone, including its corners at x = 0.
            cam_to_base: Extrinsics3D::translation_only(-0.7, 0.0, 0.8),
            max_depth: 10.0,
            actor_width: 0.5,
            actor_height: 1.7,
        }
    }
}

/// Ideal detections of `actors` seen from `truth`. The bbox center is the
/// projection of the actor's ground position lifted to camera height, so
/// back-projection recovers the position exactly. Walls occlude when a
/// world is given.
pub fn render_detections(
    actors: &[ScriptedActor],
    t: f64,
    truth: &Pose2D,
    cam: &CameraConfig,
    world: Option<&World2D>,
) -> Vec<Detection> {
    let base_to_cam = cam.cam_to_base.inverse();
    let cam_origin = truth.transform_point(&Point2::new(cam.cam_to_base.tx, cam.cam_to_base.ty));
    let mut out = Vec::new();
    for a in actors {
        let pos = a.position_at(t);
        let in_base = truth.inverse_transform_point(&pos);
        let p_cam = base_to_cam.transform_point(&Point3::new(in_base.x, in_base.y, cam.cam_to_base.tz));
        let Some((u, v, depth)) = cam.intrinsics.project(&p_cam) else {
            continue;
        };
        if depth > cam.max_depth || !(0.0..cam.width).contains(&u) || !(0.0..cam.height).contains(&v) {
            continue;
        }
        if let Some(w) = world {
            let d = pos - cam_origin;
            let dist = d.norm();
            if dist > 1e-9 && w.raycast(&cam_origin, d.y.atan2(d.x), dist).is_some() {
                continue;
            }
        }
        let (bw, bh) = (
            cam.intrinsics.fx * cam.actor_width / depth,
            cam.intrinsics.fy * cam.actor_height / depth,
        );
        out.push(Detection {
            stamp: t,
            class_name: a.class_name.clone(),
            confidence: 1.0,
            u: u - 0.5 * bw,
            v: v - 0.5 * bh,
            w: bw,
            h: bh,
            depth: Some(depth),
        });
    }
    out
}
