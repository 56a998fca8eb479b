//! Scenario files, the fixed-step simulation loop, run logs and trajectory
//! metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::config::{parse_toml, ParseError};
use crate::control::{LowLevelConfig, LowLevelController, Mission, MissionSpec};
use crate::ekf::{estimate_log_header, estimate_log_row, Ekf, EkfConfig, Measurement, UpdateOutcome};
use crate::geom::{angle_diff, Pose2D, Twist2D};
use crate::mapio::{read_map, write_map, MapIoError};
use crate::mcl::{Mcl, MclConfig, ParticleSet};
use crate::perception::{
    filter_classes, project_obstacle, render_detections, CameraConfig, ClassWhitelist, ObstaclePoint, SafetyConfig,
    ScriptedActor,
};
use crate::sensors::{
    sample_gps, sample_imu, simulate_planar_scan, GeoOrigin, GpsParams, ImuParams, ImuState, ImuTruth, LaserScan,
    PlanarLidar,
};
use crate::slam::{Slam, SlamConfig, SlamEvent};
use crate::teleop::{
    encode_command, CommandKind, Effect, FullMap, Inbound, MapSync, Mode, OperatorCommand, ServerMessage, Session,
    TelemetryFrame, TeleopLimits,
};
use crate::vehicle::{read_encoders, step_bicycle, ActuatorCommand, EncoderReading, VehicleParams, VehicleState};
use crate::world::{OccupancyGrid, Thresholds, World2D, WorldError, WorldSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("scenario {0}")]
    Parse(#[from] ParseError),
    #[error("scenario: {0}")]
    Config(String),
    #[error("world: {0}")]
    World(#[from] WorldError),
    #[error("map: {0}")]
    Map(#[from] MapIoError),
    #[error("run log line {line}: {msg}")]
    Log { line: u64, msg: String },
    #[error("trajectories differ in length: {est} vs {truth}")]
    LengthMismatch { est: usize, truth: usize },
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        1
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// EKF dead reckoning only.
    Odom,
    /// MCL on a known map.
    Localize,
    /// Mapping with the scan matcher.
    Slam,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub duration: f64,
    pub dt: f64,
    pub seed: u64,
    pub mode: RunMode,
    pub start: [f64; 3],
    /// Consecutive SLAM divergences tolerated before the run aborts.
    pub max_divergences: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            duration: 10.0,
            dt: 0.01,
            seed: 0,
            mode: RunMode::Odom,
            start: [0.0; 3],
            max_divergences: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorsSection {
    pub odom_rate: f64,
    pub lidar_rate: f64,
    pub camera_rate: f64,
    pub gps_enabled: bool,
    pub lidar: PlanarLidar,
    pub imu: ImuParams,
    pub gps: GpsParams,
    pub geo: GeoOrigin,
    pub camera: CameraConfig,
}

impl Default for SensorsSection {
    fn default() -> Self {
        Self {
            odom_rate: 50.0,
            lidar_rate: 10.0,
            camera_rate: 10.0,
            gps_enabled: false,
            lidar: PlanarLidar::default(),
            imu: ImuParams::default(),
            gps: GpsParams::default(),
            geo: GeoOrigin::default(),
            camera: CameraConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParticleInit {
    /// Gaussian cloud around the start pose.
    Pose,
    /// Uniform over the map's free cells.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeSection {
    pub init: ParticleInit,
    pub particles: usize,
    pub sigma_xy: f64,
    pub sigma_theta: f64,
    /// Map YAML, relative to the scenario file. Without one the known map
    /// is rasterized from the world.
    pub map: Option<String>,
    pub map_resolution: f64,
}

impl Default for LocalizeSection {
    fn default() -> Self {
        Self {
            init: ParticleInit::Pose,
            particles: 500,
            sigma_xy: 0.2,
            sigma_theta: 0.1,
            map: None,
            map_resolution: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopSection {
    pub token: String,
    pub v_max: f64,
    pub w_max: f64,
    pub timeout: f64,
    pub telemetry_rate: f64,
    /// Map-delta runs per telemetry frame.
    pub max_runs: usize,
    pub bind: String,
}

impl Default for TeleopSection {
    fn default() -> Self {
        Self {
            token: "lmdbot".into(),
            v_max: 1.0,
            w_max: 1.0,
            timeout: 0.5,
            telemetry_rate: 10.0,
            max_runs: 2500,
            bind: "127.0.0.1:8765".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub sim: SimSection,
    pub world: WorldSpec,
    pub vehicle: VehicleParams,
    pub sensors: SensorsSection,
    pub ekf: EkfConfig,
    pub mcl: MclConfig,
    pub localize: LocalizeSection,
    pub slam: SlamConfig,
    pub control: LowLevelConfig,
    pub mission: MissionSpec,
    pub safety: SafetyConfig,
    pub actors: Vec<ScriptedActor>,
    pub teleop: TeleopSection,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Sensor periods in whole sim steps.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Periods {
    odom: u64,
    imu: u64,
    gps: u64,
    lidar: u64,
    camera: u64,
}

fn period(rate: f64, dt: f64, what: &str) -> Result<u64, HarnessError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(HarnessError::Config(format!("{what} rate must be positive")));
    }
    let steps = 1.0 / (rate * dt);
    let n = steps.round();
    if n < 1.0 || (steps - n).abs() > 1e-6 * n {
        return Err(HarnessError::Config(format!(
            "{what} period 1/{rate} s is not a whole number of dt = {dt} s steps"
        )));
    }
    Ok(n as u64)
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, HarnessError> {
        let sc: Scenario = parse_toml(text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Scenario, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut sc = Self::parse(&text)?;
        sc.base_dir = path.parent().map(Path::to_path_buf);
        Ok(sc)
    }

    /// Number of logged steps.
    pub fn steps(&self) -> u64 {
        (self.sim.duration / self.sim.dt + 1e-9).floor() as u64
    }

    pub fn start_pose(&self) -> Pose2D {
        let [x, y, t] = self.sim.start;
        Pose2D::new(x, y, t)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m: String| HarnessError::Config(m);
        let s = &self.sim;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return Err(cfg(format!("sim.dt must be positive, got {}", s.dt)));
        }
        if !(s.duration >= 0.0 && s.duration.is_finite()) {
            return Err(cfg(format!("sim.duration must be non-negative, got {}", s.duration)));
        }
        if s.duration > 0.0 && s.duration < s.dt {
            return Err(cfg("sim.duration must be 0 or at least one dt".into()));
        }
        if !s.start.iter().all(|v| v.is_finite()) {
            return Err(cfg("sim.start must be finite".into()));
        }
        self.periods()?;
        self.vehicle.validate().map_err(|e| cfg(format!("vehicle: {e}")))?;
        self.mcl.validate().map_err(|e| cfg(format!("mcl: {e}")))?;
        self.control
            .speed
            .validate()
            .map_err(|e| cfg(format!("control.speed: {e}")))?;
        self.control
            .steering
            .validate()
            .map_err(|e| cfg(format!("control.steering: {e}")))?;
        if !self.mission.waypoints.is_empty() {
            self.mission.build().map_err(|e| cfg(format!("mission: {e}")))?;
        }
        for (i, a) in self.actors.iter().enumerate() {
            a.validate().map_err(|e| cfg(format!("actors[{i}]: {e}")))?;
        }
        if !(self.safety.stop_dist > 0.0 && self.safety.corridor_halfwidth >= 0.0) {
            return Err(cfg("safety.stop_dist must be positive".into()));
        }
        if !(self.teleop.timeout > 0.0) {
            return Err(cfg("teleop.timeout must be positive".into()));
        }
        if s.mode == RunMode::Localize && !(self.localize.particles > 0 && self.localize.map_resolution > 0.0) {
            return Err(cfg("localize needs particles > 0 and map_resolution > 0".into()));
        }
        Ok(())
    }

    fn periods(&self) -> Result<Periods, HarnessError> {
        let dt = self.sim.dt;
        let s = &self.sensors;
        Ok(Periods {
            odom: period(s.odom_rate, dt, "sensors.odom")?,
            imu: period(s.imu.rate, dt, "sensors.imu")?,
            gps: period(s.gps.rate, dt, "sensors.gps")?,
            lidar: period(s.lidar_rate, dt, "sensors.lidar")?,
            camera: period(s.camera_rate, dt, "sensors.camera")?,
        })
    }

    /// The localization map: from `localize.map` if set, else rasterized
    /// from the world with a 1 m margin.
    pub fn known_map(&self, world: &World2D) -> Result<OccupancyGrid, HarnessError> {
        if let Some(p) = &self.localize.map {
            let path = self.base_dir.as_deref().unwrap_or(Path::new("")).join(p);
            return Ok(read_map(&path)?);
        }
        Ok(rasterized_map(world, self.localize.map_resolution))
    }
}

/// Wall cells occupied, everything else free, covering the world's bounds
/// plus a 1 m margin. Cell centers sit on whole multiples of `res` offset
/// by half a cell so integer-coordinate walls fall mid-cell.
pub fn rasterized_map(world: &World2D, res: f64) -> OccupancyGrid {
    let b = world.bounds();
    let (w, h) = if world.segments().is_empty() {
        (1, 1)
    } else {
        (
            ((b.width() + 2.0) / res).ceil() as usize + 1,
            ((b.height() + 2.0) / res).ceil() as usize + 1,
        )
    };
    let (ox, oy) = if world.segments().is_empty() {
        (0.0, 0.0)
    } else {
        (b.min.x - 1.0 - res / 2.0, b.min.y - 1.0 - res / 2.0)
    };
    world.to_grid(w, h, res, Pose2D::new(ox, oy, 0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    EkfGated { sensor: &'static str, mahalanobis2: f64 },
    SlamDiverged,
    MclReset,
    SafetyStop,
    SafetyClear,
    WaypointReached(usize),
    MissionComplete,
    Connected,
    Disconnected,
    ModeChanged(Mode),
    Fallback,
    CommandRejected(String),
    Diverged(String),
}

impl EventKind {
    fn name(&self) -> &'static str {
        match self {
            EventKind::EkfGated { .. } => "ekf_gated",
            EventKind::SlamDiverged => "slam_diverged",
            EventKind::MclReset => "mcl_reset",
            EventKind::SafetyStop => "safety_stop",
            EventKind::SafetyClear => "safety_clear",
            EventKind::WaypointReached(_) => "waypoint_reached",
            EventKind::MissionComplete => "mission_complete",
            EventKind::Connected => "operator_connected",
            EventKind::Disconnected => "operator_disconnected",
            EventKind::ModeChanged(_) => "mode_changed",
            EventKind::Fallback => "watchdog_fallback",
            EventKind::CommandRejected(_) => "command_rejected",
            EventKind::Diverged(_) => "diverged",
        }
    }

    fn detail(&self) -> String {
        match self {
            EventKind::EkfGated { sensor, mahalanobis2 } => format!("{sensor} d2={mahalanobis2}"),
            EventKind::WaypointReached(i) => i.to_string(),
            EventKind::ModeChanged(m) => mode_name(*m).into(),
            EventKind::CommandRejected(s) | EventKind::Diverged(s) => s.replace([',', '\n'], ";"),
            _ => String::new(),
        }
    }
}

pub fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Auto => "AUTO",
        Mode::Teleop => "TELEOP",
        Mode::Estop => "ESTOP",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub stamp: f64,
    pub kind: EventKind,
}

/// One logged tick.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub stamp: f64,
    pub truth: Pose2D,
    pub ekf: Pose2D,
    pub mcl: Option<Pose2D>,
    pub slam: Option<Pose2D>,
    pub cmd: Twist2D,
    pub mode: Mode,
}

pub const TRAJECTORY_HEADER: &str =
    "stamp,truth_x,truth_y,truth_th,ekf_x,ekf_y,ekf_th,mcl_x,mcl_y,mcl_th,slam_x,slam_y,slam_th,cmd_v,cmd_w,mode";

fn push_pose(out: &mut String, p: Option<&Pose2D>) {
    match p {
        Some(p) => write!(out, ",{},{},{}", p.x, p.y, p.theta).expect("string write"),
        None => out.push_str(",,,"),
    }
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let mut out = self.stamp.to_string();
        push_pose(&mut out, Some(&self.truth));
        push_pose(&mut out, Some(&self.ekf));
        push_pose(&mut out, self.mcl.as_ref());
        push_pose(&mut out, self.slam.as_ref());
        write!(out, ",{},{},{}", self.cmd.v, self.cmd.omega, mode_name(self.mode)).expect("string write");
        out
    }
}

#[derive(Deserialize)]
struct RowWire {
    stamp: f64,
    truth_x: f64,
    truth_y: f64,
    truth_th: f64,
    ekf_x: f64,
    ekf_y: f64,
    ekf_th: f64,
    mcl_x: Option<f64>,
    mcl_y: Option<f64>,
    mcl_th: Option<f64>,
    slam_x: Option<f64>,
    slam_y: Option<f64>,
    slam_th: Option<f64>,
    cmd_v: f64,
    cmd_w: f64,
    mode: Mode,
}

fn opt_pose(x: Option<f64>, y: Option<f64>, t: Option<f64>, what: &str) -> Result<Option<Pose2D>, String> {
    match (x, y, t) {
        (Some(x), Some(y), Some(t)) => Ok(Some(Pose2D { x, y, theta: t })),
        (None, None, None) => Ok(None),
        _ => Err(format!("{what} pose is partially filled")),
    }
}

/// Parses a trajectory CSV as written by [`RunLog::write`].
pub fn read_trajectory<R: std::io::Read>(r: R) -> Result<Vec<LogRow>, HarnessError> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(|e| HarnessError::Log {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().ne(TRAJECTORY_HEADER.split(',')) {
        return Err(HarnessError::Log {
            line: 1,
            msg: format!("expected header {TRAJECTORY_HEADER}"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.deserialize::<RowWire>().enumerate() {
        let line = i as u64 + 2;
        let w = rec.map_err(|e| HarnessError::Log {
            line,
            msg: e.to_string(),
        })?;
        let bad = |msg: String| HarnessError::Log { line, msg };
        let nums = [
            w.stamp, w.truth_x, w.truth_y, w.truth_th, w.ekf_x, w.ekf_y, w.ekf_th, w.cmd_v, w.cmd_w,
        ];
        if !nums.iter().all(|v| v.is_finite()) {
            return Err(bad("non-finite value".into()));
        }
        rows.push(LogRow {
            stamp: w.stamp,
            truth: Pose2D {
                x: w.truth_x,
                y: w.truth_y,
                theta: w.truth_th,
            },
            ekf: Pose2D {
                x: w.ekf_x,
                y: w.ekf_y,
                theta: w.ekf_th,
            },
            mcl: opt_pose(w.mcl_x, w.mcl_y, w.mcl_th, "mcl").map_err(bad)?,
            slam: opt_pose(w.slam_x, w.slam_y, w.slam_th, "slam").map_err(bad)?,
            cmd: Twist2D {
                v: w.cmd_v,
                omega: w.cmd_w,
            },
            mode: w.mode,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedInput {
    pub tick: u64,
    pub input: Inbound,
}

impl RecordedInput {
    pub fn to_json(&self) -> String {
        match &self.input {
            Inbound::Connected => format!("{{\"tick\":{},\"event\":\"connected\"}}", self.tick),
            Inbound::Disconnected => format!("{{\"tick\":{},\"event\":\"disconnected\"}}", self.tick),
            Inbound::Command(c) => {
                format!("{{\"tick\":{},\"cmd\":{}}}", self.tick, encode_command(c).trim_end())
            }
        }
    }
}

#[derive(Deserialize)]
struct RecordedWire {
    tick: u64,
    #[serde(default)]
    event: Option<String>,
    #[serde(default)]
    cmd: Option<serde_json::Value>,
}

/// Parses a `commands.jsonl` recording.
pub fn read_recording(text: &str) -> Result<Vec<RecordedInput>, HarnessError> {
    let mut out: Vec<RecordedInput> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line_no = i as u64 + 1;
        let bad = |msg: String| HarnessError::Log { line: line_no, msg };
        let w: RecordedWire = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let input = match (w.event.as_deref(), w.cmd) {
            (Some("connected"), None) => Inbound::Connected,
            (Some("disconnected"), None) => Inbound::Disconnected,
            (None, Some(c)) => {
                Inbound::Command(crate::teleop::decode_command(&c.to_string()).map_err(|e| bad(e.to_string()))?)
            }
            _ => return Err(bad("expected exactly one of event or cmd".into())),
        };
        if out.last().is_some_and(|p| p.tick > w.tick) {
            return Err(bad("ticks must not decrease".into()));
        }
        out.push(RecordedInput { tick: w.tick, input });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    pub events: Vec<Event>,
    pub ekf_rows: Vec<String>,
    pub inputs: Vec<RecordedInput>,
    pub map: Option<OccupancyGrid>,
    /// Set when the run stopped early because an estimator diverged.
    pub diverged: Option<String>,
}

impl RunLog {
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from(TRAJECTORY_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn events_csv(&self) -> String {
        let mut out = String::from("stamp,kind,detail\n");
        for e in &self.events {
            writeln!(out, "{},{},{}", e.stamp, e.kind.name(), e.kind.detail()).expect("string write");
        }
        out
    }

    pub fn ekf_csv(&self) -> String {
        let mut out = estimate_log_header();
        out.push('\n');
        for r in &self.ekf_rows {
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    /// Writes the artifacts into `dir`; an empty log writes nothing.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        if self.rows.is_empty() {
            return Ok(Vec::new());
        }
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut written = Vec::new();
        let mut put = |name: &str, text: String| -> Result<(), HarnessError> {
            let p = dir.join(name);
            fs::write(&p, text).map_err(io_err(&p))?;
            written.push(p);
            Ok(())
        };
        put("trajectory.csv", self.trajectory_csv())?;
        put("events.csv", self.events_csv())?;
        put("ekf.csv", self.ekf_csv())?;
        if !self.inputs.is_empty() {
            put(
                "commands.jsonl",
                self.inputs.iter().map(|r| r.to_json() + "\n").collect(),
            )?;
        }
        if let Some(m) = &self.map {
            let yaml = write_map(m, &dir.join("map"), &Thresholds::default())?;
            written.push(yaml.with_extension("pgm"));
            written.push(yaml);
        }
        Ok(written)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ate {
    pub rmse_xy: f64,
    pub rmse_theta: f64,
    pub max_xy: f64,
}

pub fn compute_ate(est: &[Pose2D], truth: &[Pose2D]) -> Result<Ate, HarnessError> {
    if est.len() != truth.len() {
        return Err(HarnessError::LengthMismatch {
            est: est.len(),
            truth: truth.len(),
        });
    }
    if est.is_empty() {
        return Ok(Ate {
            rmse_xy: 0.0,
            rmse_theta: 0.0,
            max_xy: 0.0,
        });
    }
    let (mut sxy, mut sth, mut max) = (0.0f64, 0.0f64, 0.0f64);
    for (e, t) in est.iter().zip(truth) {
        let d2 = (e.x - t.x).powi(2) + (e.y - t.y).powi(2);
        sxy += d2;
        sth += angle_diff(e.theta, t.theta).powi(2);
        max = max.max(d2.sqrt());
    }
    let n = est.len() as f64;
    Ok(Ate {
        rmse_xy: (sxy / n).sqrt(),
        rmse_theta: (sth / n).sqrt(),
        max_xy: max,
    })
}

/// Independent random streams per subsystem, all derived from one seed.
#[derive(Debug, Clone)]
struct Streams {
    lidar: ChaCha8Rng,
    imu: ChaCha8Rng,
    gps: ChaCha8Rng,
    mcl: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            lidar: stream(1),
            imu: stream(2),
            gps: stream(3),
            mcl: stream(4),
        }
    }
}

/// Estimate pinned to the EKF pose at the time it was computed, so it can
/// be carried forward with odometry between scans.
#[derive(Debug, Clone, Copy)]
struct Anchor {
    estimate: Pose2D,
    ekf_at: Pose2D,
}

impl Anchor {
    fn carry(&self, ekf_now: &Pose2D) -> Pose2D {
        self.estimate.compose(&self.ekf_at.between(ekf_now))
    }
}

/// Replies the sim sends back to the operator after a tick.
pub type Replies = Vec<ServerMessage>;

/// The fixed-step simulation. Call [`Sim::step`] until
/// [`Sim::is_finished`], then [`Sim::finish`].
pub struct Sim {
    sc: Scenario,
    world: World2D,
    periods: Periods,
    truth: VehicleState,
    ekf: Ekf,
    mcl: Option<Mcl>,
    mcl_anchor: Option<Anchor>,
    mcl_cov_trace: Option<f64>,
    slam: Option<Slam>,
    slam_anchor: Option<Anchor>,
    slam_fail_streak: usize,
    mission: Option<Mission>,
    mission_done: bool,
    llc: LowLevelController,
    session: Option<Session>,
    streams: Streams,
    imu_state: ImuState,
    prev_enc: EncoderReading,
    prev_speed: f64,
    obstacles: Vec<ObstaclePoint>,
    whitelist: ClassWhitelist,
    known_map: Option<OccupancyGrid>,
    last_scan: Option<LaserScan>,
    gate_stopped: bool,
    last_cmd: Twist2D,
    active_wp: Option<usize>,
    echo: Option<u64>,
    k: u64,
    n: u64,
    log: RunLog,
}

impl Sim {
    /// `known_map` overrides the scenario's localization map.
    pub fn new(sc: Scenario, known_map: Option<OccupancyGrid>) -> Result<Sim, HarnessError> {
        sc.validate()?;
        let world = sc.world.build()?;
        let periods = sc.periods()?;
        let start = sc.start_pose();
        let mut streams = Streams::new(sc.sim.seed);
        let truth = VehicleState::at(start);
        let ekf = Ekf::new(start, 0.0, sc.ekf);
        let (mcl, known_map) = if sc.sim.mode == RunMode::Localize {
            let map = match known_map {
                Some(m) => m,
                None => sc.known_map(&world)?,
            };
            let l = &sc.localize;
            let ps = match l.init {
                ParticleInit::Pose => {
                    ParticleSet::gaussian(&start, l.sigma_xy, l.sigma_theta, l.particles, sc.mcl, &mut streams.mcl)
                }
                ParticleInit::Uniform => ParticleSet::uniform(&map, l.particles, sc.mcl, &mut streams.mcl)
                    .map_err(|e| HarnessError::Config(format!("localize: {e}")))?,
            };
            (Some(Mcl::new(ps, &map)), Some(map))
        } else {
            (None, None)
        };
        // A cloud seeded around the start pose has a meaningful mean from
        // the outset; a uniform one does not until the first update.
        let initial = match (&mcl, sc.localize.init) {
            (Some(m), ParticleInit::Pose) => m.estimate().ok(),
            _ => None,
        };
        let slam = if sc.sim.mode == RunMode::Slam {
            Some(Slam::new(sc.slam).map_err(|e| HarnessError::Config(format!("slam: {e}")))?)
        } else {
            None
        };
        let mission = if sc.mission.waypoints.is_empty() {
            None
        } else {
            Some(sc.mission.build().map_err(HarnessError::Config)?)
        };
        let prev_enc = read_encoders(&truth, &sc.vehicle, 0.0);
        Ok(Sim {
            n: sc.steps(),
            world,
            periods,
            truth,
            ekf,
            mcl,
            mcl_anchor: initial.as_ref().map(|e| Anchor {
                estimate: e.pose,
                ekf_at: start,
            }),
            mcl_cov_trace: initial.as_ref().map(|e| e.cov.trace()),
            slam,
            slam_anchor: None,
            slam_fail_streak: 0,
            mission,
            mission_done: false,
            llc: LowLevelController::new(sc.control),
            session: None,
            streams,
            imu_state: ImuState::new(start.theta, 0.0),
            prev_enc,
            prev_speed: 0.0,
            obstacles: Vec::new(),
            whitelist: ClassWhitelist::default(),
            known_map,
            last_scan: None,
            gate_stopped: false,
            last_cmd: Twist2D::ZERO,
            active_wp: None,
            echo: None,
            k: 0,
            log: RunLog::default(),
            sc,
        })
    }

    /// Enables the operator session; inputs passed to [`Sim::step`] are
    /// recorded for replay.
    pub fn with_operator(mut self) -> Self {
        let t = &self.sc.teleop;
        self.session = Some(Session::new(
            t.token.clone(),
            TeleopLimits {
                v_max: t.v_max,
                w_max: t.w_max,
            },
            t.timeout,
        ));
        self
    }

    pub fn scenario(&self) -> &Scenario {
        &self.sc
    }

    pub fn world(&self) -> &World2D {
        &self.world
    }

    pub fn tick(&self) -> u64 {
        self.k
    }

    pub fn stamp(&self) -> f64 {
        self.k as f64 * self.sc.sim.dt
    }

    pub fn is_finished(&self) -> bool {
        self.k >= self.n || self.log.diverged.is_some()
    }

    pub fn truth(&self) -> &VehicleState {
        &self.truth
    }

    pub fn ekf(&self) -> &Ekf {
        &self.ekf
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn mode(&self) -> Mode {
        self.session.as_ref().map_or(Mode::Auto, Session::mode)
    }

    pub fn obstacles(&self) -> &[ObstaclePoint] {
        &self.obstacles
    }

    pub fn last_command(&self) -> Twist2D {
        self.last_cmd
    }

    pub fn mcl_pose(&self) -> Option<Pose2D> {
        self.mcl_anchor.map(|a| a.carry(&self.ekf.state().pose()))
    }

    pub fn slam_pose(&self) -> Option<Pose2D> {
        self.slam_anchor.map(|a| a.carry(&self.ekf.state().pose()))
    }

    pub fn slam(&self) -> Option<&Slam> {
        self.slam.as_ref()
    }

    /// Pose the mission and safety gate act on.
    pub fn nav_pose(&self) -> Pose2D {
        match self.sc.sim.mode {
            RunMode::Odom => self.ekf.state().pose(),
            RunMode::Localize => self.mcl_pose().unwrap_or_else(|| self.ekf.state().pose()),
            RunMode::Slam => self.slam_pose().unwrap_or_else(|| self.ekf.state().pose()),
        }
    }

    fn event(&mut self, kind: EventKind) {
        let stamp = self.stamp();
        self.log.events.push(Event { stamp, kind });
    }

    fn diverge(&mut self, reason: String) {
        self.event(EventKind::Diverged(reason.clone()));
        self.log.diverged = Some(reason);
    }

    fn fuse(&mut self, m: &Measurement, sensor: &'static str) {
        match self.ekf.fuse(m) {
            Ok(UpdateOutcome::Gated { mahalanobis2 }) => self.event(EventKind::EkfGated { sensor, mahalanobis2 }),
            Ok(UpdateOutcome::Accepted { .. }) => {}
            Err(e) => self.diverge(format!("ekf {sensor}: {e}")),
        }
        if self.log.diverged.is_none() && !self.ekf.state().is_finite() {
            self.diverge("ekf state is not finite".into());
        }
    }

    fn apply_inputs(&mut self, inputs: &[Inbound], replies: &mut Replies) {
        let now = self.stamp();
        let Some(mut session) = self.session.take() else {
            return;
        };
        for input in inputs {
            self.log.inputs.push(RecordedInput {
                tick: self.k,
                input: input.clone(),
            });
            match input {
                Inbound::Connected => {
                    session.connected(now);
                    self.echo = None;
                    self.event(EventKind::Connected);
                }
                Inbound::Disconnected => self.event(EventKind::Disconnected),
                Inbound::Command(c) => match session.handle(c, now) {
                    Ok(effect) => {
                        self.echo = Some(c.seq);
                        match effect {
                            Effect::ModeChanged(m) => self.event(EventKind::ModeChanged(m)),
                            Effect::Pong(seq) => replies.push(ServerMessage::Pong { seq }),
                            Effect::Stored => {}
                        }
                    }
                    Err(r) => {
                        self.event(EventKind::CommandRejected(r.to_string()));
                        replies.push(ServerMessage::Err {
                            msg: r.to_string(),
                            seq: Some(c.seq),
                        });
                    }
                },
            }
        }
        if session.tick(now) {
            self.event(EventKind::Fallback);
            self.event(EventKind::ModeChanged(Mode::Estop));
        }
        self.session = Some(session);
    }

    fn sense(&mut self) {
        let t = self.stamp();
        let k = self.k;
        let p = self.periods;
        let vp = self.sc.vehicle;
        if k > 0 && k.is_multiple_of(p.odom) {
            let cur = read_encoders(&self.truth, &vp, t);
            let cfg = *self.ekf.config();
            match crate::ekf::odometry_from_encoders(&self.prev_enc, &cur, &vp, cfg.odom_sigma_v, cfg.odom_sigma_omega)
            {
                Ok(m) => self.fuse(&m, "odom"),
                Err(e) => self.diverge(format!("odometry: {e}")),
            }
            self.prev_enc = cur;
        }
        if k > 0 && k.is_multiple_of(p.imu) {
            let truth = ImuTruth {
                yaw_rate: self.truth.yaw_rate(&vp),
                accel_x: (self.truth.speed - self.prev_speed) / self.sc.sim.dt,
                accel_y: self.truth.speed * self.truth.yaw_rate(&vp),
            };
            let s = sample_imu(
                &truth,
                &mut self.imu_state,
                &self.sc.sensors.imu,
                &mut self.streams.imu,
                t,
            );
            let cfg = *self.ekf.config();
            let m = if cfg.use_imu_yaw {
                Measurement::imu_rate_and_yaw(s.yaw_rate, s.yaw, cfg.imu_sigma_rate, cfg.imu_sigma_yaw, t)
            } else {
                Measurement::imu_rate(s.yaw_rate, cfg.imu_sigma_rate, t)
            };
            self.fuse(&m, "imu");
        }
        if self.sc.sensors.gps_enabled && k > 0 && k.is_multiple_of(p.gps) {
            let fix = sample_gps(
                &self.truth.pose.position(),
                &self.sc.sensors.geo,
                &self.sc.sensors.gps,
                &mut self.streams.gps,
                t,
            );
            if let Some(f) = fix.filter(|f| f.valid) {
                self.fuse(&Measurement::gps(f.east, f.north, f.sigma, t), "gps");
            }
        }
        if self.log.diverged.is_some() {
            return;
        }
        if let Err(e) = self.ekf.predict_to(t) {
            self.diverge(format!("ekf predict: {e}"));
            return;
        }
        if k.is_multiple_of(p.lidar) {
            let scan = simulate_planar_scan(
                &self.world,
                &self.truth.pose,
                &self.sc.sensors.lidar,
                &mut self.streams.lidar,
                t,
            );
            self.process_scan(&scan);
            self.last_scan = Some(scan);
        }
        if k.is_multiple_of(p.camera) && !self.sc.actors.is_empty() {
            let dets = render_detections(
                &self.sc.actors,
                t,
                &self.truth.pose,
                &self.sc.sensors.camera,
                Some(&self.world),
            );
            let kept = filter_classes(&dets, &self.whitelist, self.sc.safety.min_conf);
            let nav = self.nav_pose();
            let cam = &self.sc.sensors.camera;
            self.obstacles = kept
                .iter()
                .filter_map(|d| project_obstacle(d, &cam.intrinsics, &cam.cam_to_base, &nav).ok())
                .collect();
        }
    }

    fn process_scan(&mut self, scan: &LaserScan) {
        let ekf_pose = self.ekf.state().pose();
        if let Some(mcl) = self.mcl.as_mut() {
            let r = mcl.step(&ekf_pose, scan, &mut self.streams.mcl);
            if r.updated {
                if let Ok(e) = mcl.estimate() {
                    self.mcl_anchor = Some(Anchor {
                        estimate: e.pose,
                        ekf_at: ekf_pose,
                    });
                    self.mcl_cov_trace = Some(e.cov.trace());
                }
            }
            if r.reset {
                self.event(EventKind::MclReset);
            }
        }
        if let Some(slam) = self.slam.as_mut() {
            let prior = match self.slam_anchor {
                Some(a) => a.carry(&ekf_pose),
                None => ekf_pose,
            };
            let rep = match slam.step(scan, &prior) {
                Ok(r) => r,
                Err(e) => {
                    self.diverge(format!("slam: {e}"));
                    return;
                }
            };
            self.slam_anchor = Some(Anchor {
                estimate: rep.pose,
                ekf_at: ekf_pose,
            });
            if rep.events.contains(&SlamEvent::Diverged) {
                self.slam_fail_streak += 1;
                self.event(EventKind::SlamDiverged);
                if self.slam_fail_streak > self.sc.sim.max_divergences {
                    let n = self.slam_fail_streak;
                    self.diverge(format!("slam diverged on {n} consecutive scans"));
                }
            } else {
                self.slam_fail_streak = 0;
            }
        }
    }

    /// Advances one tick: operator inputs, sensors and estimators, mission,
    /// safety gate, PIDs, vehicle. Returns replies for the operator.
    pub fn step(&mut self, inputs: &[Inbound]) -> Replies {
        let mut replies = Vec::new();
        if self.is_finished() {
            return replies;
        }
        let t = self.stamp();
        self.apply_inputs(inputs, &mut replies);
        self.sense();
        if self.log.diverged.is_some() {
            return replies;
        }

        let nav = self.nav_pose();
        let mut proposal = Twist2D::ZERO;
        if let Some(m) = self.mission.as_mut() {
            let out = m.step(&nav);
            proposal = out.twist;
            self.active_wp = out.active;
            if let Some(i) = out.reached {
                self.event(EventKind::WaypointReached(i));
            }
            if out.done && !self.mission_done {
                self.mission_done = true;
                self.event(EventKind::MissionComplete);
            }
        }
        let mode = self.mode();
        let selected = self.session.as_ref().map_or(proposal, |s| s.select(proposal));
        let s = self.sc.safety;
        let gated = crate::perception::safety_gate(&self.obstacles, &nav, selected, s.stop_dist, s.corridor_halfwidth);
        let stopped = gated.is_zero() && !selected.is_zero();
        if stopped != self.gate_stopped {
            self.gate_stopped = stopped;
            self.event(if stopped {
                EventKind::SafetyStop
            } else {
                EventKind::SafetyClear
            });
        }
        self.last_cmd = gated;

        let vp = self.sc.vehicle;
        let cmd = if mode == Mode::Estop || stopped {
            self.llc.halt()
        } else {
            let st = self.ekf.state();
            let measured = Twist2D::new(st.mean[crate::ekf::IV], st.mean[crate::ekf::IOMEGA]);
            self.llc.step(&gated, &measured, self.sc.sim.dt, &vp)
        };

        self.log.rows.push(LogRow {
            stamp: t,
            truth: self.truth.pose,
            ekf: self.ekf.state().pose(),
            mcl: self.mcl_pose(),
            slam: self.slam_pose(),
            cmd: gated,
            mode,
        });
        self.log.ekf_rows.push(estimate_log_row(self.ekf.state()));

        self.prev_speed = self.truth.speed;
        self.truth = step_bicycle(&self.truth, &cmd_checked(cmd), self.sc.sim.dt, &vp);
        self.k += 1;
        replies
    }

    /// Telemetry snapshot. Map deltas are limited to the scenario's
    /// per-frame run budget.
    pub fn telemetry(&self, sync: &mut MapSync) -> TelemetryFrame {
        let map = self.slam.as_ref().map(|s| s.map()).or(self.known_map.as_ref());
        let payload = map.map(|g| {
            let o = g.origin();
            let geometry = FullMap {
                width: g.width() as u32,
                height: g.height() as u32,
                resolution: g.resolution(),
                origin: [o.x, o.y, o.theta],
            };
            sync.next_payload(
                &geometry,
                &g.thresholded(&Thresholds::default()),
                self.sc.teleop.max_runs,
            )
        });
        let scan = self
            .last_scan
            .as_ref()
            .map(|s| {
                s.downsample(180)
                    .ranges
                    .iter()
                    .map(|r| if r.is_finite() { *r } else { -1.0 })
                    .collect()
            })
            .unwrap_or_default();
        let arr = |p: Pose2D| [p.x, p.y, p.theta];
        TelemetryFrame {
            stamp: self.stamp(),
            mode: self.mode(),
            truth: Some(arr(self.truth.pose)),
            ekf: arr(self.ekf.state().pose()),
            mcl: self.mcl_pose().map(arr),
            mcl_cov_trace: self.mcl_cov_trace,
            scan,
            map: payload,
            wp: self.active_wp,
            echo: self.echo,
            cmd: [self.last_cmd.v, self.last_cmd.omega],
        }
    }

    pub fn finish(mut self) -> RunLog {
        if self.log.rows.is_empty() {
            return self.log;
        }
        self.log.map = self.slam.map(|s| s.map().clone());
        self.log
    }
}

fn cmd_checked(c: ActuatorCommand) -> ActuatorCommand {
    debug_assert!(c.speed.is_finite() && c.steer.is_finite());
    c
}

/// Runs a scenario to completion without an operator.
pub fn run_scenario(sc: Scenario, known_map: Option<OccupancyGrid>) -> Result<RunLog, HarnessError> {
    let mut sim = Sim::new(sc, known_map)?;
    while !sim.is_finished() {
        sim.step(&[]);
    }
    Ok(sim.finish())
}

/// Re-runs a scenario feeding recorded operator inputs at their ticks.
pub fn replay_scenario(
    sc: Scenario,
    known_map: Option<OccupancyGrid>,
    inputs: &[RecordedInput],
) -> Result<RunLog, HarnessError> {
    let mut sim = Sim::new(sc, known_map)?.with_operator();
    let mut rest = inputs;
    while !sim.is_finished() {
        let k = sim.tick();
        let n = rest.iter().take_while(|r| r.tick == k).count();
        let now: Vec<Inbound> = rest[..n].iter().map(|r| r.input.clone()).collect();
        rest = &rest[n..];
        sim.step(&now);
    }
    Ok(sim.finish())
}

/// Convenience for tests and tools: the command an operator would send.
pub fn operator_command(kind: CommandKind, seq: u64, token: &str) -> OperatorCommand {
    OperatorCommand {
        kind,
        seq,
        stamp: 0.0,
        token: token.into(),
    }
}
