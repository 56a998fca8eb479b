//! Operator link: newline-delimited JSON messages, the session state
//! machine with its watchdog, run-length map deltas, and a WebSocket
//! server that shuttles messages between one operator and the sim loop.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{Receiver, Sender, TryRecvError};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Twist2D;

/// Upper bound on one serialized frame.
pub const MAX_FRAME_BYTES: usize = 64 * 1024;
/// Upper bound on one incoming message.
pub const MAX_COMMAND_BYTES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Auto,
    Teleop,
    Estop,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommandKind {
    Vel { v: f64, omega: f64 },
    SetMode(Mode),
    Estop,
    Ping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorCommand {
    pub kind: CommandKind,
    pub seq: u64,
    pub stamp: f64,
    pub token: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("message exceeds {MAX_COMMAND_BYTES} bytes")]
    TooLong,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unexpected message type {0:?}")]
    WrongType(String),
    #[error("unknown command kind {0:?}")]
    UnknownKind(String),
    #[error("command {kind} needs field {field}")]
    MissingField { kind: &'static str, field: &'static str },
    #[error("non-finite number in {0}")]
    NotFinite(&'static str),
}

/// Flat wire form of a command; field order is irrelevant and unknown
/// fields are ignored.
#[derive(Debug, Serialize, Deserialize)]
struct CommandWire {
    t: String,
    kind: String,
    seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stamp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<Mode>,
    #[serde(default)]
    token: String,
}

pub fn encode_command(c: &OperatorCommand) -> String {
    let (kind, v, w, mode) = match &c.kind {
        CommandKind::Vel { v, omega } => ("vel", Some(*v), Some(*omega), None),
        CommandKind::SetMode(m) => ("mode", None, None, Some(*m)),
        CommandKind::Estop => ("estop", None, None, None),
        CommandKind::Ping => ("ping", None, None, None),
    };
    let wire = CommandWire {
        t: "cmd".into(),
        kind: kind.into(),
        seq: c.seq,
        stamp: Some(c.stamp),
        v,
        w,
        mode,
        token: c.token.clone(),
    };
    serde_json::to_string(&wire).expect("command serializes") + "\n"
}

pub fn decode_command(text: &str) -> Result<OperatorCommand, ProtocolError> {
    if text.len() > MAX_COMMAND_BYTES {
        return Err(ProtocolError::TooLong);
    }
    let wire: CommandWire =
        serde_json::from_str(text.trim_end()).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if wire.t != "cmd" {
        return Err(ProtocolError::WrongType(wire.t));
    }
    let stamp = wire.stamp.unwrap_or(0.0);
    if !stamp.is_finite() {
        return Err(ProtocolError::NotFinite("stamp"));
    }
    let kind = match wire.kind.as_str() {
        "vel" => {
            let v = wire.v.ok_or(ProtocolError::MissingField {
                kind: "vel",
                field: "v",
            })?;
            let omega = wire.w.ok_or(ProtocolError::MissingField {
                kind: "vel",
                field: "w",
            })?;
            if !(v.is_finite() && omega.is_finite()) {
                return Err(ProtocolError::NotFinite("vel"));
            }
            CommandKind::Vel { v, omega }
        }
        "mode" => CommandKind::SetMode(wire.mode.ok_or(ProtocolError::MissingField {
            kind: "mode",
            field: "mode",
        })?),
        "estop" => CommandKind::Estop,
        "ping" => CommandKind::Ping,
        other => return Err(ProtocolError::UnknownKind(other.into())),
    };
    Ok(OperatorCommand {
        kind,
        seq: wire.seq,
        stamp,
        token: wire.token,
    })
}

/// `[start_index, run_length, value]`: cells `start..start+run` take `value`.
pub type Run = [u32; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullMap {
    pub width: u32,
    pub height: u32,
    pub resolution: f64,
    pub origin: [f64; 3],
}

/// A full-map header resets the receiver to an all-unknown grid of that
/// size before the runs are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full: Option<FullMap>,
    pub delta: Vec<Run>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub stamp: f64,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<[f64; 3]>,
    pub ekf: [f64; 3],
    pub mcl: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcl_cov_trace: Option<f64>,
    pub scan: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<MapPayload>,
    pub wp: Option<usize>,
    pub echo: Option<u64>,
    pub cmd: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "lowercase")]
pub enum ServerMessage {
    Tele(TelemetryFrame),
    Err { msg: String, seq: Option<u64> },
    Pong { seq: u64 },
    Busy,
}

pub fn encode_server(m: &ServerMessage) -> String {
    // Non-finite numbers become null, which the decoder rejects; callers
    // only send finite telemetry.
    serde_json::to_string(m).expect("server message serializes") + "\n"
}

pub fn decode_server(text: &str) -> Result<ServerMessage, ProtocolError> {
    serde_json::from_str(text.trim_end()).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn encode_telemetry(f: &TelemetryFrame) -> String {
    encode_server(&ServerMessage::Tele(f.clone()))
}

/// Unknown-cell value in thresholded grids.
pub const UNKNOWN_CELL: u8 = 205;

/// Tracks the operator's copy of a thresholded grid and emits the runs
/// needed to bring it up to date, at most `max_runs` per frame.
#[derive(Debug, Clone, Default)]
pub struct MapSync {
    client: Option<(FullMap, Vec<u8>)>,
}

impl MapSync {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forget the operator's copy, e.g. on reconnect.
    pub fn reset(&mut self) {
        self.client = None;
    }

    pub fn in_sync(&self, cells: &[u8]) -> bool {
        self.client.as_ref().is_some_and(|(_, c)| c == cells)
    }

    pub fn next_payload(&mut self, geometry: &FullMap, cells: &[u8], max_runs: usize) -> MapPayload {
        assert_eq!(cells.len(), (geometry.width * geometry.height) as usize);
        let fresh = match &self.client {
            Some((g, _)) => g != geometry,
            None => true,
        };
        if fresh {
            self.client = Some((geometry.clone(), vec![UNKNOWN_CELL; cells.len()]));
        }
        let (_, client) = self.client.as_mut().expect("set above");
        let mut runs = Vec::new();
        let mut i = 0;
        while i < cells.len() && runs.len() < max_runs {
            if client[i] == cells[i] {
                i += 1;
                continue;
            }
            let start = i;
            let val = cells[i];
            while i < cells.len() && cells[i] == val && client[i] != val {
                i += 1;
            }
            client[start..i].fill(val);
            runs.push([start as u32, (i - start) as u32, val as u32]);
        }
        MapPayload {
            full: fresh.then(|| geometry.clone()),
            delta: runs,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapApplyError {
    #[error("delta received before any full map")]
    NoBase,
    #[error("run {0:?} outside the map")]
    OutOfRange(Run),
    #[error("run value {0} is not a byte")]
    BadValue(u32),
}

/// Receiver-side reconstruction of the operator's grid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapMirror {
    pub geometry: Option<FullMap>,
    pub cells: Vec<u8>,
}

impl MapMirror {
    pub fn apply(&mut self, p: &MapPayload) -> Result<(), MapApplyError> {
        if let Some(full) = &p.full {
            self.cells = vec![UNKNOWN_CELL; full.width as usize * full.height as usize];
            self.geometry = Some(full.clone());
        }
        if self.geometry.is_none() {
            return Err(MapApplyError::NoBase);
        }
        for run in &p.delta {
            let [start, len, val] = *run;
            let end = start as usize + len as usize;
            if end > self.cells.len() {
                return Err(MapApplyError::OutOfRange(*run));
            }
            let val = u8::try_from(val).map_err(|_| MapApplyError::BadValue(val))?;
            self.cells[start as usize..end].fill(val);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopLimits {
    pub v_max: f64,
    pub w_max: f64,
}

impl Default for TeleopLimits {
    fn default() -> Self {
        Self { v_max: 1.0, w_max: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    BadToken,
    StaleSeq { seq: u64, last: u64 },
    Estopped,
    OutOfLimits,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::BadToken => write!(f, "bad token"),
            Rejection::StaleSeq { seq, last } => write!(f, "stale seq {seq} (last {last})"),
            Rejection::Estopped => write!(f, "ESTOP latched; send mode AUTO to clear"),
            Rejection::OutOfLimits => write!(f, "velocity outside teleop limits"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Stored,
    ModeChanged(Mode),
    Pong(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Watchdog {
    Ok,
    Fallback,
}

/// Fallback fires once more than `timeout` has passed since the last
/// operator command.
pub fn watchdog(last_cmd_stamp: f64, now: f64, timeout: f64) -> Watchdog {
    debug_assert!(timeout > 0.0);
    if now - last_cmd_stamp > timeout {
        Watchdog::Fallback
    } else {
        Watchdog::Ok
    }
}

/// Operator session state. Commands and ticks are applied at sim-tick
/// boundaries; all times are sim seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    token: String,
    limits: TeleopLimits,
    timeout: f64,
    mode: Mode,
    last_seq: Option<u64>,
    pending: Twist2D,
    last_cmd: f64,
}

impl Session {
    pub fn new(token: impl Into<String>, limits: TeleopLimits, timeout: f64) -> Self {
        assert!(timeout > 0.0, "watchdog timeout must be positive");
        Self {
            token: token.into(),
            limits,
            timeout,
            mode: Mode::Auto,
            last_seq: None,
            pending: Twist2D::ZERO,
            last_cmd: 0.0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn pending(&self) -> Twist2D {
        self.pending
    }

    pub fn last_seq(&self) -> Option<u64> {
        self.last_seq
    }

    /// A new connection starts a fresh sequence; the mode is kept, so an
    /// ESTOP survives reconnects until explicitly cleared.
    pub fn connected(&mut self, now: f64) {
        self.last_seq = None;
        self.last_cmd = now;
    }

    pub fn handle(&mut self, c: &OperatorCommand, now: f64) -> Result<Effect, Rejection> {
        if c.token != self.token {
            return Err(Rejection::BadToken);
        }
        if let Some(last) = self.last_seq {
            if c.seq <= last {
                return Err(Rejection::StaleSeq { seq: c.seq, last });
            }
        }
        self.last_seq = Some(c.seq);
        match (&c.kind, self.mode) {
            (CommandKind::Estop, _) | (CommandKind::SetMode(Mode::Estop), _) => {
                self.mode = Mode::Estop;
                self.pending = Twist2D::ZERO;
                Ok(Effect::ModeChanged(Mode::Estop))
            }
            (CommandKind::Ping, _) => Ok(Effect::Pong(c.seq)),
            (CommandKind::SetMode(Mode::Auto), _) => {
                self.mode = Mode::Auto;
                self.pending = Twist2D::ZERO;
                Ok(Effect::ModeChanged(Mode::Auto))
            }
            (_, Mode::Estop) => Err(Rejection::Estopped),
            (CommandKind::SetMode(Mode::Teleop), _) => {
                self.mode = Mode::Teleop;
                self.pending = Twist2D::ZERO;
                self.last_cmd = now;
                Ok(Effect::ModeChanged(Mode::Teleop))
            }
            (CommandKind::Vel { v, omega }, _) => {
                if v.abs() > self.limits.v_max || omega.abs() > self.limits.w_max {
                    return Err(Rejection::OutOfLimits);
                }
                self.pending = Twist2D::new(*v, *omega);
                self.last_cmd = now;
                Ok(Effect::Stored)
            }
        }
    }

    /// Runs the watchdog; returns true when it just demoted TELEOP to ESTOP.
    pub fn tick(&mut self, now: f64) -> bool {
        if self.mode == Mode::Teleop && watchdog(self.last_cmd, now, self.timeout) == Watchdog::Fallback {
            self.mode = Mode::Estop;
            self.pending = Twist2D::ZERO;
            return true;
        }
        false
    }

    /// Twist to execute given the mission's proposal.
    pub fn select(&self, mission: Twist2D) -> Twist2D {
        match self.mode {
            Mode::Auto => mission,
            Mode::Teleop => self.pending,
            Mode::Estop => Twist2D::ZERO,
        }
    }
}

/// What the connection handler hands to the sim loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    Connected,
    Disconnected,
    Command(OperatorCommand),
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("bridge socket: {0}")]
    Io(#[from] std::io::Error),
}

/// Handle to the connection thread.
pub struct Bridge {
    pub addr: SocketAddr,
    pub inbound: Receiver<Inbound>,
    pub outbound: Sender<String>,
    handle: Option<JoinHandle<()>>,
}

impl Bridge {
    /// Binds `addr` and starts the connection thread. The thread ends when
    /// `outbound` is dropped.
    pub fn spawn(addr: &str) -> Result<Bridge, BridgeError> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let (in_tx, in_rx) = std::sync::mpsc::channel();
        let (out_tx, out_rx) = std::sync::mpsc::channel::<String>();
        let handle = std::thread::Builder::new()
            .name("teleop-bridge".into())
            .spawn(move || connection_loop(listener, in_tx, out_rx))?;
        Ok(Bridge {
            addr: local,
            inbound: in_rx,
            outbound: out_tx,
            handle: Some(handle),
        })
    }

    /// Everything received since the last call.
    pub fn drain(&self) -> Vec<Inbound> {
        self.inbound.try_iter().collect()
    }

    pub fn send(&self, msg: &ServerMessage) {
        let _ = self.outbound.send(encode_server(msg));
    }

    pub fn shutdown(mut self) {
        let (dead, _) = std::sync::mpsc::channel();
        self.outbound = dead;
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

type Socket = tungstenite::WebSocket<TcpStream>;

const POLL: Duration = Duration::from_millis(5);

fn accept_ws(stream: TcpStream) -> Option<Socket> {
    stream.set_nonblocking(false).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(2))).ok()?;
    let ws = tungstenite::accept(stream).ok()?;
    ws.get_ref().set_read_timeout(Some(POLL)).ok()?;
    Some(ws)
}

fn send_text(ws: &mut Socket, text: &str) -> bool {
    ws.send(tungstenite::Message::text(text.trim_end())).is_ok()
}

fn connection_loop(listener: TcpListener, inbound: Sender<Inbound>, outbound: Receiver<String>) {
    let mut client: Option<Socket> = None;
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                if let Some(mut ws) = accept_ws(stream) {
                    if client.is_some() {
                        send_text(&mut ws, &encode_server(&ServerMessage::Busy));
                        let _ = ws.close(None);
                        let _ = ws.flush();
                    } else {
                        client = Some(ws);
                        if inbound.send(Inbound::Connected).is_err() {
                            return;
                        }
                    }
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {}
            Err(_) => std::thread::sleep(POLL),
        }

        // Outbound frames go to the current client or are dropped.
        loop {
            match outbound.try_recv() {
                Ok(text) => {
                    if let Some(ws) = client.as_mut() {
                        if !send_text(ws, &text) {
                            client = None;
                            let _ = inbound.send(Inbound::Disconnected);
                        }
                    }
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    if let Some(mut ws) = client.take() {
                        let _ = ws.close(None);
                        let _ = ws.flush();
                    }
                    return;
                }
            }
        }

        let Some(ws) = client.as_mut() else {
            std::thread::sleep(POLL);
            continue;
        };
        match ws.read() {
            Ok(tungstenite::Message::Text(t)) => {
                for line in t.as_str().lines().filter(|l| !l.trim().is_empty()) {
                    match decode_command(line) {
                        Ok(c) => {
                            if inbound.send(Inbound::Command(c)).is_err() {
                                return;
                            }
                        }
                        Err(e) => {
                            let msg = ServerMessage::Err {
                                msg: e.to_string(),
                                seq: None,
                            };
                            send_text(ws, &encode_server(&msg));
                        }
                    }
                }
            }
            Ok(tungstenite::Message::Close(_)) => {
                client = None;
                let _ = inbound.send(Inbound::Disconnected);
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => {
                client = None;
                let _ = inbound.send(Inbound::Disconnected);
            }
        }
    }
}
