//! Global place descriptors and top-k retrieval over the map.
//!
//! The reference encoder is a handcrafted polar occupancy spectrum; learned
//! encoders plug in through [`PlaceEncoder`] or through precomputed
//! descriptor files read by [`FileEncoder`].

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::ScanRecord;
use crate::topo_map::TopoMap;

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"TLPD";
pub const DESCRIPTOR_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlaceError {
    #[error("scan has no wall or curb cells")]
    EmptyScan,
    #[error("descriptor dimension {found} does not match {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("bad descriptor file: {0}")]
    BadDescriptorFile(String),
    #[error("no descriptor available for this scan: {0}")]
    MissingDescriptor(String),
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
}

/// L2-normalized global descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaceDescriptor {
    v: Vec<f32>,
}

impl PlaceDescriptor {
    /// Normalizes `v`; an all-zero or non-finite vector is rejected.
    pub fn normalized(mut v: Vec<f32>) -> Result<Self, PlaceError> {
        let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(PlaceError::EmptyScan);
        }
        for x in &mut v {
            *x = (*x as f64 / n) as f32;
        }
        Ok(Self { v })
    }

    /// Wraps stored values without renormalizing (exact round trips).
    pub fn from_raw(v: Vec<f32>) -> Self {
        Self { v }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn distance(&self, other: &PlaceDescriptor) -> f64 {
        self.v
            .iter()
            .zip(&other.v)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Anything that turns a processed scan into a descriptor. `frame` is the
/// index of the scan in its run, for encoders backed by precomputed outputs.
pub trait PlaceEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, rec: &ScanRecord, frame: Option<usize>) -> Result<PlaceDescriptor, PlaceError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolarEncoderConfig {
    pub radial_bins: usize,
    pub angular_bins: usize,
    /// Meters.
    pub max_range: f64,
    pub dim: usize,
}

impl Default for PolarEncoderConfig {
    fn default() -> Self {
        Self {
            radial_bins: 16,
            angular_bins: 32,
            max_range: 40.0,
            dim: 256,
        }
    }
}

/// Polar histogram of wall and curb cells; each radial row is replaced by the
/// magnitude of its angular DFT, which discards the heading.
///
/// Rotations by whole angular bins leave the descriptor unchanged; soft
/// binning keeps it smooth under other rotations and small shifts.
pub struct PolarSpectrumEncoder {
    cfg: PolarEncoderConfig,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PolarSpectrumEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolarSpectrumEncoder").field("cfg", &self.cfg).finish()
    }
}

impl Default for PolarSpectrumEncoder {
    fn default() -> Self {
        Self::new(PolarEncoderConfig::default()).expect("default encoder config is valid")
    }
}

impl PolarSpectrumEncoder {
    pub fn new(cfg: PolarEncoderConfig) -> Result<Self, PlaceError> {
        if cfg.radial_bins == 0 || cfg.angular_bins == 0 || cfg.dim == 0 || !(cfg.max_range > 0.0) {
            return Err(PlaceError::InvalidConfig(
                "bins, dim and max_range must be positive".into(),
            ));
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.angular_bins);
        Ok(Self { cfg, fft })
    }

    pub fn config(&self) -> &PolarEncoderConfig {
        &self.cfg
    }

    /// Bilinear (soft) polar histogram; square-rooted so dense facades do not
    /// drown out sparse structure.
    fn histogram(&self, rec: &ScanRecord) -> Vec<f64> {
        let (nr, na) = (self.cfg.radial_bins, self.cfg.angular_bins);
        let mut h = vec![0.0; nr * na];
        let two_pi = 2.0 * std::f64::consts::PI;
        for p in rec.wall_points.iter().chain(&rec.curb_points) {
            let r = p.norm();
            if r >= self.cfg.max_range {
                continue;
            }
            let fr = (r / self.cfg.max_range * nr as f64 - 0.5).max(0.0);
            let fa = p.y.atan2(p.x).rem_euclid(two_pi) / two_pi * na as f64 - 0.5;
            let (r0, a0) = (fr.floor(), fa.floor());
            let (wr, wa) = (fr - r0, fa - a0);
            for (dr, w1) in [(0, 1.0 - wr), (1, wr)] {
                let ri = (r0 as usize + dr).min(nr - 1);
                for (da, w2) in [(0, 1.0 - wa), (1, wa)] {
                    let ai = (a0 as i64 + da).rem_euclid(na as i64) as usize;
                    h[ri * na + ai] += w1 * w2;
                }
            }
        }
        h.iter_mut().for_each(|c: &mut f64| *c = c.sqrt());
        h
    }
}

impl PlaceEncoder for PolarSpectrumEncoder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn encode(&self, rec: &ScanRecord, _frame: Option<usize>) -> Result<PlaceDescriptor, PlaceError> {
        let h = self.histogram(rec);
        if h.iter().all(|&c| c == 0.0) {
            return Err(PlaceError::EmptyScan);
        }
        let na = self.cfg.angular_bins;
        let keep = na / 2 + 1;
        let mut out = Vec::with_capacity(self.cfg.radial_bins * keep);
        let mut buf = vec![Complex::new(0.0, 0.0); na];
        for row in h.chunks(na) {
            for (b, &c) in buf.iter_mut().zip(row) {
                *b = Complex::new(c, 0.0);
            }
            self.fft.process(&mut buf);
            out.extend(buf[..keep].iter().map(|z| z.norm() as f32));
        }
        out.resize(self.cfg.dim, 0.0);
        PlaceDescriptor::normalized(out)
    }
}

/// Reads `<dir>/<frame:06>.desc` descriptor files produced by an external model.
#[derive(Debug, Clone)]
pub struct FileEncoder {
    pub dir: PathBuf,
    pub dim: usize,
}

impl FileEncoder {
    pub fn path_for(&self, frame: usize) -> PathBuf {
        self.dir.join(format!("{frame:06}.desc"))
    }
}

impl PlaceEncoder for FileEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, _rec: &ScanRecord, frame: Option<usize>) -> Result<PlaceDescriptor, PlaceError> {
        let frame = frame.ok_or_else(|| PlaceError::MissingDescriptor("scan has no frame index".into()))?;
        let d = read_descriptor(&self.path_for(frame))?;
        if d.dim() != self.dim {
            return Err(PlaceError::DimensionMismatch {
                expected: self.dim,
                found: d.dim(),
            });
        }
        Ok(d)
    }
}

/// 16-byte header (magic, version, dim, reserved) then `dim` little-endian f32.
pub fn descriptor_to_bytes(d: &PlaceDescriptor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * d.dim());
    out.extend_from_slice(DESCRIPTOR_MAGIC);
    out.extend_from_slice(&DESCRIPTOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(d.dim() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for x in d.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Parses a descriptor; returns it and the number of bytes consumed. Values
/// are taken as stored (no renormalization).
pub fn descriptor_from_bytes(buf: &[u8]) -> Result<(PlaceDescriptor, usize), PlaceError> {
    let bad = |m: &str| PlaceError::BadDescriptorFile(m.to_string());
    if buf.len() < 16 {
        return Err(bad("truncated header"));
    }
    if &buf[..4] != DESCRIPTOR_MAGIC {
        return Err(bad("bad magic"));
    }
    if u32::from_le_bytes(buf[4..8].try_into().unwrap()) != DESCRIPTOR_VERSION {
        return Err(bad("unsupported version"));
    }
    let dim = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let end = dim
        .checked_mul(4)
        .and_then(|n| n.checked_add(16))
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| bad("truncated values"))?;
    let v: Vec<f32> = buf[16..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(bad("non-finite value"));
    }
    Ok((PlaceDescriptor::from_raw(v), end))
}

pub fn read_descriptor(path: &Path) -> Result<PlaceDescriptor, PlaceError> {
    let buf = std::fs::read(path).map_err(|e| PlaceError::MissingDescriptor(format!("{}: {e}", path.display())))?;
    let (d, used) = descriptor_from_bytes(&buf)?;
    if used != buf.len() {
        return Err(PlaceError::BadDescriptorFile("trailing bytes".into()));
    }
    Ok(d)
}

pub fn write_descriptor(path: &Path, d: &PlaceDescriptor) -> std::io::Result<()> {
    std::fs::write(path, descriptor_to_bytes(d))
}

/// Indices of the `k` stored descriptors closest to `q` (Euclidean) with
/// their distances, ascending; ties keep map order.
pub fn retrieve_top_k_in(q: &PlaceDescriptor, descriptors: &[&PlaceDescriptor], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = descriptors
        .iter()
        .enumerate()
        .map(|(i, d)| (i, q.distance(d)))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Top-k map locations for a query descriptor as `(location id, distance)`.
pub fn retrieve_top_k(q: &PlaceDescriptor, map: &TopoMap, k: usize) -> Vec<(usize, f64)> {
    let descs: Vec<&PlaceDescriptor> = map.locations.iter().map(|l| &l.descriptor).collect();
    retrieve_top_k_in(q, &descs, k)
        .into_iter()
        .map(|(i, d)| (map.locations[i].id, d))
        .collect()
}
