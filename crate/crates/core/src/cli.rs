//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 2 for usage errors, 1 for pipeline errors (printed with the
//! error variant name, e.g. `error: CorruptMap: ...`).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::curb::{detect_curbs, CurbError};
use crate::dataset::{load_run, read_frame, save_run, DatasetError};
use crate::evaluation::{associate, evaluate, read_pose_csv, write_errors_csv, EvalError};
use crate::geometry::{Pose2D, Vec2};
use crate::grid::{process_scan, GridError};
use crate::localizer::{localize_run, InitMode, LocalizeError, Localizer};
use crate::place_recognition::{read_descriptor, FileEncoder, PlaceEncoder, PlaceError};
use crate::scan_matcher::{match_scans, MatchError, MatchResult};
use crate::sim::{
    generate_world, lateral_offset, loop_waypoints, simulate_run, trajectory_from_waypoints, OdometryNoise, SimError,
};
use crate::topo_map::{build_map, load_map, map_size_on_disk, save_map, MapError};

#[derive(Debug, Parser)]
#[command(name = "topoloc", version, about = "Topological-map LiDAR localization")]
struct Cli {
    /// TOML config; every section and key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    /// Global localization of the first scan.
    Global,
    /// First row of the run's poses_gt.csv.
    Gt,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a world and simulate one run into a dataset directory.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        world_seed: Option<u64>,
        /// Sideways trajectory shift, m.
        #[arg(long, allow_negative_numbers = true)]
        lateral_offset: Option<f64>,
        /// Exact odometry (mapping run).
        #[arg(long)]
        no_noise: bool,
        /// CSV with `x,y` columns; defaults to the loop from the config.
        #[arg(long)]
        waypoints: Option<PathBuf>,
    },
    /// Build a topological map from a (mapping) run.
    BuildMap {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of precomputed `NNNNNN.desc` descriptors instead of the built-in encoder.
        #[arg(long)]
        descriptors: Option<PathBuf>,
    },
    /// Localize a run against a map; writes `t,x,y,theta,v_cur,lost,branch`.
    Localize {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "global")]
        init: InitArg,
        #[arg(long)]
        descriptors: Option<PathBuf>,
    },
    /// ATE and SR_loc of an estimated trajectory.
    Evaluate {
        #[arg(long)]
        estimated: PathBuf,
        /// `t,x,y,theta` CSV, e.g. a run's poses_gt.csv.
        #[arg(long)]
        ground_truth: PathBuf,
        /// SR_loc threshold, m [default: 10].
        #[arg(long)]
        threshold: Option<f64>,
        /// Metrics JSON output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step error CSV for plotting.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Match two frames and print the result as JSON.
    Match {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        reference: usize,
        #[arg(long)]
        candidate: usize,
        /// Run holding the candidate frame; defaults to `--run`.
        #[arg(long)]
        candidate_run: Option<PathBuf>,
        /// Initial guess `x,y,theta` (reference pose in the candidate frame).
        #[arg(long, allow_negative_numbers = true)]
        guess: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect curbs in one frame; writes leveled curb points as `x,y,z`.
    Curbs {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Curb(#[from] CurbError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Place(#[from] PlaceError),
    #[error("io: {0}")]
    Io(String),
    #[error("bad argument: {0}")]
    BadArgument(String),
}

/// Innermost variant name from a derived `Debug` rendering:
/// `Map(CorruptMap("..."))` gives `CorruptMap`.
fn variant_name(debug: &str) -> &str {
    let mut s = debug;
    loop {
        let end = s.find(|c: char| !(c.is_alphanumeric() || c == '_')).unwrap_or(s.len());
        let rest = &s[end..];
        match rest.strip_prefix('(') {
            Some(inner) if inner.starts_with(|c: char| c.is_ascii_uppercase()) => s = inner,
            _ => return &s[..end],
        }
    }
}

impl CliError {
    pub fn name(&self) -> String {
        let dbg = format!("{self:?}");
        let inner = match self {
            CliError::Io(_) | CliError::BadArgument(_) => dbg.as_str(),
            _ => dbg.split_once('(').map_or(dbg.as_str(), |(_, r)| r),
        };
        variant_name(inner).to_string()
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    match path {
        Some(p) => fs::write(p, s).map_err(|e| io(p, e)),
        None => {
            print!("{s}");
            Ok(())
        }
    }
}

fn parse_pose(s: &str) -> Result<Pose2D, CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::BadArgument(format!("pose '{s}' is not x,y,theta")))?;
    match v[..] {
        [x, y, th] => Ok(Pose2D::new(x, y, th)),
        _ => Err(CliError::BadArgument(format!("pose '{s}' is not x,y,theta"))),
    }
}

fn read_waypoints(path: &Path) -> Result<Vec<Vec2>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io(path, e))?;
        let num = |k: usize| rec.get(k).and_then(|v| v.trim().parse::<f64>().ok());
        match (num(0), num(1)) {
            (Some(x), Some(y)) => out.push(Vec2::new(x, y)),
            _ => return Err(CliError::BadArgument(format!("{}: rows must be x,y", path.display()))),
        }
    }
    if out.len() < 2 {
        return Err(CliError::BadArgument(format!(
            "{}: need at least two waypoints",
            path.display()
        )));
    }
    Ok(out)
}

/// Built-in encoder, or descriptor files whose dimension is taken from frame 0.
fn make_encoder(cfg: &RunConfig, descriptors: Option<&Path>) -> Result<Box<dyn PlaceEncoder>, CliError> {
    match descriptors {
        None => Ok(Box::new(cfg.encoder()?)),
        Some(dir) => {
            let mut enc = FileEncoder {
                dir: dir.to_path_buf(),
                dim: 0,
            };
            enc.dim = read_descriptor(&enc.path_for(0))?.dim();
            Ok(Box::new(enc))
        }
    }
}

#[derive(Serialize)]
struct MatchOutput {
    reference: usize,
    candidate: usize,
    guess: Option<Pose2D>,
    #[serde(flatten)]
    result: MatchResult,
    millis: f64,
}

#[derive(Serialize)]
struct CurbOutput {
    frame: usize,
    points: usize,
    plane_normal: [f64; 3],
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate {
            out,
            seed,
            world_seed,
            lateral_offset: offset,
            no_noise,
            waypoints,
        } => {
            let s = &mut cfg.simulate;
            s.seed = seed.unwrap_or(s.seed);
            s.world_seed = world_seed.unwrap_or(s.world_seed);
            s.lateral_offset = offset.unwrap_or(s.lateral_offset);
            s.noisy_odometry &= !no_noise;
            cfg.validate()?;
            log::info!("resolved config:\n{}", cfg.to_toml());
            let s = &cfg.simulate;
            let world = generate_world(s.world_seed, &cfg.world)?;
            let wps = match &waypoints {
                Some(p) => read_waypoints(p)?,
                None => loop_waypoints(
                    &cfg.world,
                    (s.loop_blocks_x[0], s.loop_blocks_x[1]),
                    (s.loop_blocks_y[0], s.loop_blocks_y[1]),
                ),
            };
            let traj = lateral_offset(&trajectory_from_waypoints(&wps, s.step), s.lateral_offset);
            let noise = if s.noisy_odometry {
                cfg.noise.clone()
            } else {
                OdometryNoise::none()
            };
            let run = simulate_run(&world, &traj, &cfg.lidar, &noise, s.dt, s.seed)?;
            save_run(&run, &out)?;
            let cfg_path = out.join("config.toml");
            fs::write(&cfg_path, cfg.to_toml()).map_err(|e| io(&cfg_path, e))?;
            log::info!("wrote {} frames to {}", run.len(), out.display());
        }
        Command::BuildMap { run, out, descriptors } => {
            log::info!("resolved config:\n{}", cfg.to_toml());
            let data = load_run(&run)?;
            let enc = make_encoder(&cfg, descriptors.as_deref())?;
            let t0 = Instant::now();
            let map = build_map(&data.frames, &data.gt_poses, &cfg.map, &cfg.pipeline(), enc.as_ref())?;
            save_map(&map, &out)?;
            let bytes = map_size_on_disk(&out).map_err(|e| io(&out, e))?;
            log::info!(
                "map: {} locations, {} edges, {} bytes, built in {:.1} s",
                map.len(),
                map.edges.len(),
                bytes,
                t0.elapsed().as_secs_f64()
            );
        }
        Command::Localize {
            map,
            run,
            out,
            init,
            descriptors,
        } => {
            let map = load_map(&map)?;
            // the map's own pipeline settings win over the config's
            log::info!("resolved config:\n{}", cfg.to_toml());
            let data = load_run(&run)?;
            let enc = make_encoder(&cfg, descriptors.as_deref())?;
            let init = match init {
                InitArg::Global => InitMode::Global,
                InitArg::Gt => InitMode::Pose(
                    *data
                        .gt_poses
                        .first()
                        .ok_or_else(|| CliError::BadArgument("run has no poses".into()))?,
                ),
            };
            let mut loc = Localizer::new(&map, enc.as_ref(), cfg.localizer.clone(), cfg.matcher.clone())?;
            let t0 = Instant::now();
            let reports = localize_run(&mut loc, &data.frames, &data.odometry, init)?;
            let mut w = csv::Writer::from_path(&out).map_err(|e| io(&out, e))?;
            w.write_record(["t", "x", "y", "theta", "v_cur", "lost", "branch"])
                .map_err(|e| io(&out, e))?;
            for r in &reports {
                let p = r.global_pose;
                w.write_record([
                    data.timestamps[r.t].to_string(),
                    p.x.to_string(),
                    p.y.to_string(),
                    p.theta.to_string(),
                    r.v_cur.to_string(),
                    r.lost.to_string(),
                    format!("{:?}", r.branch),
                ])
                .map_err(|e| io(&out, e))?;
            }
            w.flush().map_err(|e| io(&out, e))?;
            log::info!(
                "localized {} frames in {:.1} s: {:?}",
                reports.len(),
                t0.elapsed().as_secs_f64(),
                loc.stats()
            );
        }
        Command::Evaluate {
            estimated,
            ground_truth,
            threshold,
            out,
            plot,
        } => {
            cfg.evaluation.threshold = threshold.unwrap_or(cfg.evaluation.threshold);
            cfg.validate()?;
            log::info!("resolved config:\n{}", cfg.to_toml());
            let est = read_pose_csv(&estimated)?;
            let gt = read_pose_csv(&ground_truth)?;
            let tp = associate(&est, &gt, cfg.evaluation.max_gap)?;
            let (metrics, errors) = evaluate(&tp, cfg.evaluation.threshold)?;
            print!("{}", metrics.table("topoloc"));
            if let Some(p) = &plot {
                write_errors_csv(p, &tp, &errors)?;
            }
            if let Some(p) = &out {
                write_json(Some(p), &metrics)?;
            }
        }
        Command::Match {
            run,
            reference,
            candidate,
            candidate_run,
            guess,
            out,
        } => {
            log::info!("resolved config:\n{}", cfg.to_toml());
            let pipeline = cfg.pipeline();
            let guess = guess.as_deref().map(parse_pose).transpose()?;
            let r = process_scan(&read_frame(&run, reference)?, &pipeline)?;
            let c = process_scan(
                &read_frame(candidate_run.as_deref().unwrap_or(&run), candidate)?,
                &pipeline,
            )?;
            let t0 = Instant::now();
            let result = match_scans(&r, &c, guess.as_ref(), &cfg.matcher, &pipeline.features)?;
            let millis = t0.elapsed().as_secs_f64() * 1e3;
            write_json(
                out.as_deref(),
                &MatchOutput {
                    reference,
                    candidate,
                    guess,
                    result,
                    millis,
                },
            )?;
        }
        Command::Curbs { run, frame, out } => {
            log::info!("resolved config:\n{}", cfg.to_toml());
            let det = detect_curbs(&read_frame(&run, frame)?, &cfg.curb)?;
            if let Some(p) = &out {
                let mut w = csv::Writer::from_path(p).map_err(|e| io(p, e))?;
                w.write_record(["x", "y", "z"]).map_err(|e| io(p, e))?;
                for q in &det.points {
                    w.write_record([q.x.to_string(), q.y.to_string(), q.z.to_string()])
                        .map_err(|e| io(p, e))?;
                }
                w.flush().map_err(|e| io(p, e))?;
            }
            let n = det.plane.normal;
            write_json(
                None,
                &CurbOutput {
                    frame,
                    points: det.points.len(),
                    plane_normal: [n.x, n.y, n.z],
                },
            )?;
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            1
        }
    }
}
