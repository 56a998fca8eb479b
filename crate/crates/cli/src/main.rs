use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use lmdbot::geom::Pose2D;
use lmdbot::harness::{
    compute_ate, read_recording, read_trajectory, replay_scenario, run_scenario, HarnessError, LogRow, RunLog, RunMode,
    Scenario, Sim,
};
use lmdbot::mapio::read_map;
use lmdbot::teleop::{encode_telemetry, Bridge, Inbound, MapSync};
use lmdbot::world::OccupancyGrid;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "lmdbot", version, about = "Last-mile delivery robot simulator")]
struct Cli {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for run artifacts [default: out]. Replay writes only when given.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Override the simulation step in seconds.
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a scenario in the mode it declares.
    Sim { scenario: PathBuf },
    /// Mapping run; writes map.pgm and map.yaml.
    Slam { scenario: PathBuf },
    /// Localize on a known map.
    Localize {
        scenario: PathBuf,
        /// Map sidecar (.yaml) to localize against.
        #[arg(long)]
        map: PathBuf,
    },
    /// Trajectory error of each estimator against ground truth.
    Eval {
        /// Run directory or trajectory.csv.
        run: PathBuf,
    },
    /// Paced run with the teleoperation bridge.
    Serve {
        scenario: PathBuf,
        /// Listen address, overriding the scenario.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Re-run a recorded run and compare the trajectory.
    Replay { run: PathBuf },
}

/// What a run directory needs to be replayed.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    scenario: PathBuf,
    mode: String,
    seed: u64,
    dt: f64,
    map: Option<PathBuf>,
    operator: bool,
}

const MANIFEST: &str = "run.json";

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::Sim { scenario } => simulate(&cli, scenario, None, None),
        Cmd::Slam { scenario } => simulate(&cli, scenario, Some(RunMode::Slam), None),
        Cmd::Localize { scenario, map } => simulate(&cli, scenario, Some(RunMode::Localize), Some(map)),
        Cmd::Eval { run } => eval(run),
        Cmd::Serve { scenario, bind } => serve(&cli, scenario, bind.as_deref()),
        Cmd::Replay { run } => replay(&cli, run),
    }
}

impl Cli {
    fn out(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn mode_name(m: RunMode) -> &'static str {
    match m {
        RunMode::Odom => "odom",
        RunMode::Localize => "localize",
        RunMode::Slam => "slam",
    }
}

fn parse_mode(s: &str) -> Result<RunMode, Failure> {
    match s {
        "odom" => Ok(RunMode::Odom),
        "localize" => Ok(RunMode::Localize),
        "slam" => Ok(RunMode::Slam),
        other => Err(Failure::Config(format!("{MANIFEST}: unknown mode {other:?}"))),
    }
}

fn absolute(p: &Path) -> Result<PathBuf, Failure> {
    fs::canonicalize(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))
}

fn load(cli: &Cli, path: &Path, mode: Option<RunMode>) -> Result<Scenario, Failure> {
    let mut sc = Scenario::load(path)?;
    if let Some(s) = cli.seed {
        sc.sim.seed = s;
    }
    if let Some(dt) = cli.dt {
        sc.sim.dt = dt;
    }
    if let Some(m) = mode {
        sc.sim.mode = m;
    }
    sc.validate()?;
    Ok(sc)
}

fn load_map(path: Option<&Path>) -> Result<Option<OccupancyGrid>, Failure> {
    path.map(|p| read_map(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display()))))
        .transpose()
}

fn finish(
    cli: &Cli,
    sc: &Scenario,
    scenario: &Path,
    map: Option<&Path>,
    log: &RunLog,
    operator: bool,
) -> Result<(), Failure> {
    let dir = cli.out();
    let written = log.write(&dir)?;
    if !written.is_empty() {
        let manifest = Manifest {
            scenario: absolute(scenario)?,
            mode: mode_name(sc.sim.mode).into(),
            seed: sc.sim.seed,
            dt: sc.sim.dt,
            map: map.map(absolute).transpose()?,
            operator,
        };
        let p = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&p, text + "\n").map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
    }
    summarize(log);
    if written.is_empty() {
        println!("no artifacts (empty run)");
    } else {
        println!("artifacts in {}", dir.display());
    }
    match &log.diverged {
        Some(why) => Err(Failure::Runtime(format!("diverged: {why}"))),
        None => Ok(()),
    }
}

fn summarize(log: &RunLog) {
    println!("{} ticks, {} events", log.rows.len(), log.events.len());
    if let Some(last) = log.rows.last() {
        let p = last.truth;
        println!("final pose {:.3} {:.3} {:.3}", p.x, p.y, p.theta);
    }
}

fn simulate(cli: &Cli, path: &Path, mode: Option<RunMode>, map: Option<&Path>) -> Result<(), Failure> {
    let sc = load(cli, path, mode)?;
    let known = load_map(map)?;
    let log = run_scenario(sc.clone(), known)?;
    finish(cli, &sc, path, map, &log, false)
}

fn trajectory_path(run: &Path) -> PathBuf {
    if run.is_dir() {
        run.join("trajectory.csv")
    } else {
        run.to_path_buf()
    }
}

fn eval(run: &Path) -> Result<(), Failure> {
    let path = trajectory_path(run);
    let file = fs::File::open(&path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let rows = read_trajectory(file)?;
    if rows.is_empty() {
        return Err(Failure::Config(format!("{}: no rows", path.display())));
    }
    let estimators: [(&str, fn(&LogRow) -> Option<Pose2D>); 3] =
        [("ekf", |r| Some(r.ekf)), ("mcl", |r| r.mcl), ("slam", |r| r.slam)];
    println!("estimator,rows,rmse_xy,rmse_theta,max_xy");
    for (name, pick) in estimators {
        let (est, truth): (Vec<Pose2D>, Vec<Pose2D>) =
            rows.iter().filter_map(|r| pick(r).map(|e| (e, r.truth))).unzip();
        if est.is_empty() {
            continue;
        }
        let a = compute_ate(&est, &truth)?;
        println!(
            "{name},{},{:.6},{:.6},{:.6}",
            est.len(),
            a.rmse_xy,
            a.rmse_theta,
            a.max_xy
        );
    }
    Ok(())
}

fn serve(cli: &Cli, path: &Path, bind: Option<&str>) -> Result<(), Failure> {
    let sc = load(cli, path, None)?;
    let addr = bind.unwrap_or(&sc.teleop.bind).to_string();
    let period = ((1.0 / (sc.teleop.telemetry_rate * sc.sim.dt)).round() as u64).max(1);
    let dt = sc.sim.dt;
    let mut sim = Sim::new(sc.clone(), None)?.with_operator();
    let bridge = Bridge::spawn(&addr).map_err(|e| Failure::Config(format!("{addr}: {e}")))?;
    println!("listening on ws://{}", bridge.addr);

    let mut sync = MapSync::new();
    let t0 = Instant::now();
    while !sim.is_finished() {
        let due = t0 + Duration::from_secs_f64(sim.tick() as f64 * dt);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        let inputs = bridge.drain();
        if inputs.iter().any(|i| matches!(i, Inbound::Connected)) {
            sync.reset();
        }
        for reply in sim.step(&inputs) {
            bridge.send(&reply);
        }
        if sim.tick() % period == 0 {
            let _ = bridge.outbound.send(encode_telemetry(&sim.telemetry(&mut sync)));
        }
        if sim.log().diverged.is_some() {
            break;
        }
    }
    bridge.shutdown();
    let log = sim.finish();
    finish(cli, &sc, path, None, &log, true)
}

fn replay(cli: &Cli, run: &Path) -> Result<(), Failure> {
    let mp = run.join(MANIFEST);
    let text = fs::read_to_string(&mp).map_err(|e| Failure::Config(format!("{}: {e}", mp.display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", mp.display())))?;
    let mut sc = Scenario::load(&m.scenario)?;
    sc.sim.seed = m.seed;
    sc.sim.dt = m.dt;
    sc.sim.mode = parse_mode(&m.mode)?;
    let known = load_map(m.map.as_deref())?;

    let rec = run.join("commands.jsonl");
    let inputs = if rec.exists() {
        let text = fs::read_to_string(&rec).map_err(|e| Failure::Config(format!("{}: {e}", rec.display())))?;
        read_recording(&text)?
    } else {
        Vec::new()
    };
    let log = if m.operator {
        replay_scenario(sc, known, &inputs)?
    } else {
        run_scenario(sc, known)?
    };

    let tp = run.join("trajectory.csv");
    let recorded = fs::read_to_string(&tp).map_err(|e| Failure::Config(format!("{}: {e}", tp.display())))?;
    let fresh = log.trajectory_csv();
    if let Some(dir) = &cli.out_dir {
        log.write(dir)?;
    }
    match recorded.lines().zip(fresh.lines()).position(|(a, b)| a != b) {
        None if recorded.len() == fresh.len() => {
            println!("replay identical: {} rows", log.rows.len());
            Ok(())
        }
        None => Err(Failure::Runtime(format!(
            "replay length differs: {} vs {} lines",
            recorded.lines().count(),
            fresh.lines().count()
        ))),
        Some(i) => Err(Failure::Runtime(format!("replay differs at line {}", i + 1))),
    }
}
