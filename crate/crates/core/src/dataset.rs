//! On-disk run datasets: `poses_gt.csv`, `odometry.csv` and `frames/NNNNNN.bin`.
//!
//! Frame files hold a 16-byte header (`TLPC`, point count u32, rings u16,
//! azimuth bins u16, reserved u32) followed by little-endian f32 records
//! `x, y, z, ring, azimuth`. Clouds without ring structure store rings = 0.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{PointCloud, Pose2D, RingStructure, Vec3};
use crate::sim::RunDataset;

const FRAME_MAGIC: &[u8; 4] = b"TLPC";
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(String),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io(format!("{}: {e}", path.display()))
}

pub fn frame_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("frames").join(format!("{k:06}.bin"))
}

pub fn encode_frame(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * cloud.len());
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    let (rings, bins) = cloud.structure.as_ref().map_or((0, 0), |s| (s.rings, s.azimuth_bins));
    out.extend_from_slice(&rings.to_le_bytes());
    out.extend_from_slice(&bins.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for (k, p) in cloud.points.iter().enumerate() {
        let (r, a) = cloud
            .structure
            .as_ref()
            .map_or((0.0, 0.0), |s| (s.ring[k] as f32, s.azimuth[k] as f32));
        for v in [p.x as f32, p.y as f32, p.z as f32, r, a] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_frame(buf: &[u8]) -> Result<PointCloud, DatasetError> {
    if buf.len() < HEADER_LEN || &buf[..4] != FRAME_MAGIC {
        return Err(DatasetError::Corrupt("bad frame header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(buf[o..o + 2].try_into().unwrap());
    let n = u32_at(4) as usize;
    let (rings, bins) = (u16_at(8), u16_at(10));
    if buf.len() != HEADER_LEN + n * RECORD_LEN {
        return Err(DatasetError::Corrupt(format!(
            "frame holds {} bytes, header announces {n} points",
            buf.len()
        )));
    }
    let f = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let mut points = Vec::with_capacity(n);
    let (mut ring, mut azimuth) = (Vec::new(), Vec::new());
    for k in 0..n {
        let o = HEADER_LEN + k * RECORD_LEN;
        points.push(Vec3::new(f(o) as f64, f(o + 4) as f64, f(o + 8) as f64));
        if rings > 0 {
            let (r, a) = (f(o + 12), f(o + 16));
            if !(r >= 0.0 && r < rings as f32 && a >= 0.0 && a < bins as f32) {
                return Err(DatasetError::Corrupt(format!("point {k}: ring/azimuth out of range")));
            }
            ring.push(r as u16);
            azimuth.push(a as u16);
        }
    }
    let structure = (rings > 0).then_some(RingStructure {
        rings,
        azimuth_bins: bins,
        ring,
        azimuth,
    });
    Ok(PointCloud { points, structure })
}

pub fn read_frame(dir: &Path, k: usize) -> Result<PointCloud, DatasetError> {
    let p = frame_path(dir, k);
    decode_frame(&fs::read(&p).map_err(|e| io_err(&p, e))?)
}

fn write_poses(path: &Path, header: [&str; 4], ts: &[f64], poses: &[Pose2D]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for (t, p) in ts.iter().zip(poses) {
        w.write_record([t.to_string(), p.x.to_string(), p.y.to_string(), p.theta.to_string()])
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn read_poses(path: &Path) -> Result<(Vec<f64>, Vec<Pose2D>), DatasetError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let (mut ts, mut poses) = (Vec::new(), Vec::new());
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| DatasetError::Corrupt(format!("{}: {e}", path.display())))?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| DatasetError::Corrupt(format!("{}: bad number on row {}", path.display(), row + 1)))?;
        if v.len() != 4 {
            return Err(DatasetError::Corrupt(format!(
                "{}: row {} needs 4 columns",
                path.display(),
                row + 1
            )));
        }
        ts.push(v[0]);
        poses.push(Pose2D::new(v[1], v[2], v[3]));
    }
    Ok((ts, poses))
}

/// Writes a run into `dir` (created if missing).
pub fn save_run(run: &RunDataset, dir: &Path) -> Result<(), DatasetError> {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).map_err(|e| io_err(&frames, e))?;
    write_poses(
        &dir.join("poses_gt.csv"),
        ["t", "x", "y", "theta"],
        &run.timestamps,
        &run.gt_poses,
    )?;
    write_poses(
        &dir.join("odometry.csv"),
        ["t", "dx", "dy", "dtheta"],
        &run.timestamps,
        &run.odometry,
    )?;
    run.frames.par_iter().enumerate().try_for_each(|(k, c)| {
        let p = frame_path(dir, k);
        fs::write(&p, encode_frame(c)).map_err(|e| io_err(&p, e))
    })
}

/// The pose and odometry tables of a run, without its frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPoses {
    pub timestamps: Vec<f64>,
    pub gt_poses: Vec<Pose2D>,
    pub odometry: Vec<Pose2D>,
}

pub fn load_run_poses(dir: &Path) -> Result<RunPoses, DatasetError> {
    let (ts, gt) = read_poses(&dir.join("poses_gt.csv"))?;
    let (ts_o, odom) = read_poses(&dir.join("odometry.csv"))?;
    if ts != ts_o {
        return Err(DatasetError::Corrupt(
            "poses_gt.csv and odometry.csv timestamps differ".into(),
        ));
    }
    if let Some(k) = (1..ts.len()).find(|&k| !(ts[k] > ts[k - 1])) {
        return Err(DatasetError::Corrupt(format!(
            "timestamps not increasing at row {}",
            k + 1
        )));
    }
    Ok(RunPoses {
        timestamps: ts,
        gt_poses: gt,
        odometry: odom,
    })
}

pub fn load_run(dir: &Path) -> Result<RunDataset, DatasetError> {
    let RunPoses {
        timestamps,
        gt_poses,
        odometry,
    } = load_run_poses(dir)?;
    let frames = (0..timestamps.len())
        .into_par_iter()
        .map(|k| read_frame(dir, k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunDataset {
        timestamps,
        frames,
        gt_poses,
        odometry,
    })
}
