//! Shared geometric substrate: SE(2) poses, point clouds, occupancy grids,
//! exact Euclidean distance maps and grid overlap.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("no cell of class {0:?} exists")]
    NoSourceCells(CellClass),
    #[error("both grids have zero occupied cells")]
    EmptyGrids,
    #[error("grid resolutions differ ({0} vs {1})")]
    ResolutionMismatch(f64, f64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("corrupt grid encoding: {0}")]
    CorruptGrid(String),
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

/// Rigid transform in the plane. `theta` is always kept in (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Default for Pose2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn translation(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn translation_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    /// SE(2) product `self * other`.
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

    /// `self^-1 * other`: the pose of `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose2D) -> Pose2D {
        self.inverse().compose(other)
    }

    /// `R(theta) * pt + t`.
    pub fn apply(&self, pt: &Vec2) -> Vec2 {
        let (s, c) = self.theta.sin_cos();
        Vec2::new(c * pt.x - s * pt.y + self.x, s * pt.x + c * pt.y + self.y)
    }

    /// Translation distance and absolute heading difference to another pose.
    pub fn error_to(&self, other: &Pose2D) -> (f64, f64) {
        let d = self.between(other);
        (d.translation_norm(), d.theta.abs())
    }
}

/// Ring/azimuth organisation of a spinning LiDAR scan.
#[derive(Debug, Clone, PartialEq)]
pub struct RingStructure {
    pub rings: u16,
    pub azimuth_bins: u16,
    pub ring: Vec<u16>,
    pub azimuth: Vec<u16>,
}

/// Raw LiDAR sample, sensor (robot) frame, meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub structure: Option<RingStructure>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            structure: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum CellClass {
    Unknown = 0,
    Free = 1,
    Wall = 2,
    Curb = 3,
}

impl CellClass {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(CellClass::Unknown),
            1 => Some(CellClass::Free),
            2 => Some(CellClass::Wall),
            3 => Some(CellClass::Curb),
            _ => None,
        }
    }

    pub fn is_occupied(self) -> bool {
        matches!(self, CellClass::Wall | CellClass::Curb)
    }
}

/// Classified 2D grid. Cell `(i, j)` is column `i`, row `j`; its center lies at
/// `((i + 0.5) * res, (j + 0.5) * res)` in grid coordinates and `origin` maps
/// grid coordinates into the scan frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub origin: Pose2D,
    pub cells: Vec<CellClass>,
}

impl OccupancyGrid {
    pub fn new(resolution: f64, width: usize, height: usize, origin: Pose2D) -> Self {
        assert!(resolution > 0.0, "resolution must be positive");
        Self {
            resolution,
            width,
            height,
            origin,
            cells: vec![CellClass::Unknown; width * height],
        }
    }

    /// Square grid of `extent` meters centered on the scan origin.
    pub fn centered(resolution: f64, extent: f64) -> Self {
        let n = (extent / resolution).round() as usize;
        let half = n as f64 * resolution / 2.0;
        Self::new(resolution, n, n, Pose2D::new(-half, -half, 0.0))
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.resolution > 0.0) {
            return Err(GeometryError::InvalidGrid("resolution must be > 0".into()));
        }
        if self.width * self.height != self.cells.len() {
            return Err(GeometryError::InvalidGrid(format!(
                "{}x{} does not match {} cells",
                self.width,
                self.height,
                self.cells.len()
            )));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> CellClass {
        self.cells[self.index(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: CellClass) {
        let k = self.index(i, j);
        self.cells[k] = c;
    }

    /// Continuous grid coordinates (in cells) of a scan-frame point.
    pub fn to_grid_coords(&self, p: &Vec2) -> Vec2 {
        self.origin.inverse().apply(p) / self.resolution
    }

    /// Cell containing a scan-frame point, if inside the grid.
    pub fn cell_of(&self, p: &Vec2) -> Option<(usize, usize)> {
        let g = self.to_grid_coords(p);
        let (fi, fj) = (g.x.floor(), g.y.floor());
        if fi < 0.0 || fj < 0.0 || fi >= self.width as f64 || fj >= self.height as f64 {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    /// Scan-frame center of a cell.
    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        self.grid_to_scan(&Vec2::new(i as f64 + 0.5, j as f64 + 0.5))
    }

    /// Maps continuous grid coordinates (cells) into the scan frame.
    pub fn grid_to_scan(&self, g: &Vec2) -> Vec2 {
        self.origin.apply(&(g * self.resolution))
    }

    pub fn count(&self, cls: CellClass) -> usize {
        self.cells.iter().filter(|&&c| c == cls).count()
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_occupied()).count()
    }

    /// Cell-center coordinates of every cell of the given class.
    pub fn class_points(&self, cls: CellClass) -> Vec<Vec2> {
        let mut out = Vec::new();
        for j in 0..self.height {
            for i in 0..self.width {
                if self.get(i, j) == cls {
                    out.push(self.cell_center(i, j));
                }
            }
        }
        out
    }

    fn contains_scan_point(&self, p: &Vec2) -> bool {
        self.cell_of(p).is_some()
    }
}

/// Truncated Euclidean distance to the nearest cell of one class.
///
/// Distances are kept as exact squared cell distances so lookups are exact;
/// `d` and `grad` are derived on access.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub origin: Pose2D,
    pub d_max: f64,
    pub source: CellClass,
    /// Set when the grid had no cell of the source class; `d` is then `d_max` everywhere.
    pub no_source: bool,
    sq_cells: Vec<u32>,
}

impl DistanceMap {
    /// Distance in meters at a cell.
    #[inline]
    pub fn d(&self, i: usize, j: usize) -> f64 {
        let sq = self.sq_cells[j * self.width + i];
        if sq == u32::MAX {
            return self.d_max;
        }
        ((sq as f64).sqrt() * self.resolution).min(self.d_max)
    }

    #[inline]
    fn d_clamped(&self, i: isize, j: isize) -> f64 {
        let i = i.clamp(0, self.width as isize - 1) as usize;
        let j = j.clamp(0, self.height as isize - 1) as usize;
        self.d(i, j)
    }

    /// Spatial gradient of `d` at a cell: central differences inside, one-sided
    /// at the borders, zero on truncated plateau cells.
    pub fn grad(&self, i: usize, j: usize) -> Vec2 {
        if self.d(i, j) >= self.d_max {
            return Vec2::zeros();
        }
        let axis = |lo: f64, hi: f64, span: f64| (hi - lo) / (span * self.resolution);
        let gx = match (i > 0, i + 1 < self.width) {
            (true, true) => axis(self.d(i - 1, j), self.d(i + 1, j), 2.0),
            (false, true) => axis(self.d(i, j), self.d(i + 1, j), 1.0),
            (true, false) => axis(self.d(i - 1, j), self.d(i, j), 1.0),
            (false, false) => 0.0,
        };
        let gy = match (j > 0, j + 1 < self.height) {
            (true, true) => axis(self.d(i, j - 1), self.d(i, j + 1), 2.0),
            (false, true) => axis(self.d(i, j), self.d(i, j + 1), 1.0),
            (true, false) => axis(self.d(i, j - 1), self.d(i, j), 1.0),
            (false, false) => 0.0,
        };
        // grid axes -> scan frame
        let (s, c) = self.origin.theta.sin_cos();
        Vec2::new(c * gx - s * gy, s * gx + c * gy)
    }

    /// Bilinear lookup at a scan-frame point, returning the interpolated distance
    /// and its exact derivative with respect to the scan-frame point. `None` when
    /// the point falls outside the map.
    pub fn sample(&self, p: &Vec2) -> Option<(f64, Vec2)> {
        let g = self.origin.inverse().apply(p) / self.resolution;
        // interpolate between cell centers
        let u = g.x - 0.5;
        let v = g.y - 0.5;
        if !(u >= -0.5 && v >= -0.5 && u <= self.width as f64 - 0.5 && v <= self.height as f64 - 0.5) {
            return None;
        }
        let i0 = u.floor();
        let j0 = v.floor();
        let fx = u - i0;
        let fy = v - j0;
        let (i0, j0) = (i0 as isize, j0 as isize);
        let d00 = self.d_clamped(i0, j0);
        let d10 = self.d_clamped(i0 + 1, j0);
        let d01 = self.d_clamped(i0, j0 + 1);
        let d11 = self.d_clamped(i0 + 1, j0 + 1);
        let d = (1.0 - fx) * (1.0 - fy) * d00 + fx * (1.0 - fy) * d10 + (1.0 - fx) * fy * d01 + fx * fy * d11;
        let gx = ((1.0 - fy) * (d10 - d00) + fy * (d11 - d01)) / self.resolution;
        let gy = ((1.0 - fx) * (d01 - d00) + fx * (d11 - d10)) / self.resolution;
        let (s, c) = self.origin.theta.sin_cos();
        Some((d, Vec2::new(c * gx - s * gy, s * gx + c * gy)))
    }

    /// Bilinear interpolation of the stored per-cell gradient field.
    pub fn sample_grad(&self, p: &Vec2) -> Option<Vec2> {
        let g = self.origin.inverse().apply(p) / self.resolution;
        let u = g.x - 0.5;
        let v = g.y - 0.5;
        if !(u >= -0.5 && v >= -0.5 && u <= self.width as f64 - 0.5 && v <= self.height as f64 - 0.5) {
            return None;
        }
        let (i0, j0) = (u.floor(), v.floor());
        let (fx, fy) = (u - i0, v - j0);
        let clamp = |i: f64, j: f64| {
            (
                (i as isize).clamp(0, self.width as isize - 1) as usize,
                (j as isize).clamp(0, self.height as isize - 1) as usize,
            )
        };
        let at = |i: f64, j: f64| {
            let (a, b) = clamp(i, j);
            self.grad(a, b)
        };
        Some(
            at(i0, j0) * ((1.0 - fx) * (1.0 - fy))
                + at(i0 + 1.0, j0) * (fx * (1.0 - fy))
                + at(i0, j0 + 1.0) * ((1.0 - fx) * fy)
                + at(i0 + 1.0, j0 + 1.0) * (fx * fy),
        )
    }
}

const EDT_INF: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        loop {
            let p = v[k];
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *o = dq * dq + f[v[k]];
    }
}

/// Exact truncated Euclidean distance transform over cells of class `cls`.
///
/// Returns `Err(NoSourceCells)` together with nothing when the class is absent;
/// use [`distance_transform_flagged`] to obtain the all-`d_max` map instead.
pub fn distance_transform(grid: &OccupancyGrid, cls: CellClass, d_max: f64) -> Result<DistanceMap, GeometryError> {
    let map = distance_transform_flagged(grid, cls, d_max);
    if map.no_source {
        Err(GeometryError::NoSourceCells(cls))
    } else {
        Ok(map)
    }
}

/// Like [`distance_transform`] but always returns a map; an absent class yields
/// `d == d_max` everywhere with `no_source` set.
pub fn distance_transform_flagged(grid: &OccupancyGrid, cls: CellClass, d_max: f64) -> DistanceMap {
    assert!(d_max > 0.0, "d_max must be positive");
    assert!(!grid.is_empty(), "grid must be non-empty");
    let (w, h) = (grid.width, grid.height);
    let mut f: Vec<f64> = grid
        .cells
        .iter()
        .map(|&c| if c == cls { 0.0 } else { EDT_INF })
        .collect();
    let no_source = !f.contains(&0.0);

    let n = w.max(h);
    let mut buf_in = vec![0.0; n];
    let mut buf_out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    if !no_source {
        // columns
        for i in 0..w {
            for j in 0..h {
                buf_in[j] = f[j * w + i];
            }
            edt_1d(&buf_in[..h], &mut buf_out[..h], &mut v, &mut z);
            for j in 0..h {
                f[j * w + i] = buf_out[j];
            }
        }
        // rows
        for j in 0..h {
            buf_in[..w].copy_from_slice(&f[j * w..(j + 1) * w]);
            edt_1d(&buf_in[..w], &mut buf_out[..w], &mut v, &mut z);
            f[j * w..(j + 1) * w].copy_from_slice(&buf_out[..w]);
        }
    }
    let cap_cells = d_max / grid.resolution;
    let cap_sq = cap_cells * cap_cells;
    let sq_cells = f
        .iter()
        .map(|&x| {
            if no_source || x > cap_sq {
                u32::MAX
            } else {
                x.round() as u32
            }
        })
        .collect();
    DistanceMap {
        resolution: grid.resolution,
        width: w,
        height: h,
        origin: grid.origin,
        d_max,
        source: cls,
        no_source,
        sq_cells,
    }
}

/// Intersection-over-union of occupied (wall or curb) cells after mapping `reference`
/// into `candidate` with `x`. Only the region covered by both grids is compared.
pub fn grid_iou(reference: &OccupancyGrid, candidate: &OccupancyGrid, x: &Pose2D) -> Result<f64, GeometryError> {
    grid_overlap(reference, candidate, x, 0)
}

/// [`grid_iou`] with a matching tolerance: an occupied cell of either set counts
/// towards the intersection when the other set has an occupied cell within
/// `tol` cells (Chebyshev). The intersection is the mean of the two directed
/// counts, the union `|R| + |C| - I`. `tol = 0` is the exact cell IOU.
pub fn grid_overlap(
    reference: &OccupancyGrid,
    candidate: &OccupancyGrid,
    x: &Pose2D,
    tol: usize,
) -> Result<f64, GeometryError> {
    if (reference.resolution - candidate.resolution).abs() > 1e-12 {
        return Err(GeometryError::ResolutionMismatch(
            reference.resolution,
            candidate.resolution,
        ));
    }
    if reference.occupied_count() == 0 && candidate.occupied_count() == 0 {
        return Err(GeometryError::EmptyGrids);
    }
    let (w, h) = (candidate.width, candidate.height);
    let mut mapped = vec![false; w * h];
    for j in 0..reference.height {
        for i in 0..reference.width {
            if !reference.get(i, j).is_occupied() {
                continue;
            }
            let p = x.apply(&reference.cell_center(i, j));
            if let Some((ci, cj)) = candidate.cell_of(&p) {
                mapped[candidate.index(ci, cj)] = true;
            }
        }
    }
    let x_inv = x.inverse();
    let cand: Vec<bool> = (0..w * h)
        .map(|k| {
            candidate.cells[k].is_occupied()
                && reference.contains_scan_point(&x_inv.apply(&candidate.cell_center(k % w, k / w)))
        })
        .collect();
    let r = tol as isize;
    let near = |set: &[bool], k: usize| -> bool {
        if r == 0 {
            return set[k];
        }
        let (i, j) = ((k % w) as isize, (k / w) as isize);
        for dj in -r..=r {
            for di in -r..=r {
                let (a, b) = (i + di, j + dj);
                if a >= 0 && b >= 0 && (a as usize) < w && (b as usize) < h && set[b as usize * w + a as usize] {
                    return true;
                }
            }
        }
        false
    };
    let (mut n_ref, mut n_cand, mut hit_ref, mut hit_cand) = (0usize, 0usize, 0usize, 0usize);
    for k in 0..w * h {
        if mapped[k] {
            n_ref += 1;
            hit_ref += near(&cand, k) as usize;
        }
        if cand[k] {
            n_cand += 1;
            hit_cand += near(&mapped, k) as usize;
        }
    }
    let inter = (hit_ref + hit_cand) as f64 / 2.0;
    let union = n_ref as f64 + n_cand as f64 - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok(inter / union)
}

const GRID_MAGIC: &[u8; 4] = b"TGRD";
const GRID_VERSION: u16 = 1;

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn get_varint(buf: &[u8], pos: &mut usize) -> Option<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *buf.get(*pos)?;
        *pos += 1;
        v |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return Some(v);
        }
    }
    None
}

/// Serializes a grid: fixed header followed by run-length encoded classes.
/// Byte layout is documented in `docs/FORMATS.md`.
pub fn encode_grid(grid: &OccupancyGrid) -> Vec<u8> {
    let mut runs: Vec<(CellClass, u64)> = Vec::new();
    for &c in &grid.cells {
        match runs.last_mut() {
            Some((cls, n)) if *cls == c => *n += 1,
            _ => runs.push((c, 1)),
        }
    }
    let mut out = Vec::with_capacity(48 + runs.len() * 3);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&grid.resolution.to_le_bytes());
    out.extend_from_slice(&(grid.width as u32).to_le_bytes());
    out.extend_from_slice(&(grid.height as u32).to_le_bytes());
    out.extend_from_slice(&grid.origin.x.to_le_bytes());
    out.extend_from_slice(&grid.origin.y.to_le_bytes());
    out.extend_from_slice(&grid.origin.theta.to_le_bytes());
    out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
    for (c, n) in runs {
        out.push(c as u8);
        put_varint(&mut out, n);
    }
    out
}

/// Inverse of [`encode_grid`]; returns the grid and the number of bytes consumed.
pub fn decode_grid(buf: &[u8]) -> Result<(OccupancyGrid, usize), GeometryError> {
    let corrupt = |m: &str| GeometryError::CorruptGrid(m.to_string());
    if buf.len() < 52 {
        return Err(corrupt("truncated header"));
    }
    if &buf[0..4] != GRID_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != GRID_VERSION {
        return Err(corrupt("unsupported version"));
    }
    let f64_at = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let resolution = f64_at(8);
    let width = u32_at(16) as usize;
    let height = u32_at(20) as usize;
    let origin = Pose2D {
        x: f64_at(24),
        y: f64_at(32),
        theta: f64_at(40),
    };
    let run_count = u32_at(48) as usize;
    if !(resolution > 0.0) || width.checked_mul(height).is_none() {
        return Err(corrupt("bad geometry"));
    }
    let total = width * height;
    let mut cells = Vec::with_capacity(total);
    let mut pos = 52;
    for _ in 0..run_count {
        let cls = buf
            .get(pos)
            .and_then(|&b| CellClass::from_u8(b))
            .ok_or_else(|| corrupt("bad run class"))?;
        pos += 1;
        let n = get_varint(buf, &mut pos).ok_or_else(|| corrupt("truncated run"))? as usize;
        if cells.len() + n > total {
            return Err(corrupt("runs exceed grid size"));
        }
        cells.extend(std::iter::repeat_n(cls, n));
    }
    if cells.len() != total {
        return Err(corrupt("runs do not cover grid"));
    }
    Ok((
        OccupancyGrid {
            resolution,
            width,
            height,
            origin,
            cells,
        },
        pos,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    fn hom(p: &Pose2D) -> Matrix3<f64> {
        let (s, c) = p.theta.sin_cos();
        Matrix3::new(c, -s, p.x, s, c, p.y, 0.0, 0.0, 1.0)
    }

    fn assert_pose_eq(a: &Pose2D, b: &Pose2D, tol: f64) {
        assert_abs_diff_eq!(a.x, b.x, epsilon = tol);
        assert_abs_diff_eq!(a.y, b.y, epsilon = tol);
        assert_abs_diff_eq!(normalize_angle(a.theta - b.theta), 0.0, epsilon = tol);
    }

    #[test]
    fn compose_identity_and_quarter_turn() {
        let b = Pose2D::new(1.5, -2.0, 0.3);
        assert_eq!(Pose2D::identity().compose(&b), b);
        let r = Pose2D::new(1.0, 0.0, PI / 2.0).compose(&Pose2D::new(1.0, 0.0, 0.0));
        assert_pose_eq(&r, &Pose2D::new(1.0, 1.0, PI / 2.0), 1e-12);
    }

    #[test]
    fn apply_examples() {
        let p = Pose2D::identity().apply(&Vec2::new(3.0, 4.0));
        assert_eq!(p, Vec2::new(3.0, 4.0));
        let q = Pose2D::new(0.0, 0.0, PI).apply(&Vec2::new(1.0, 0.0));
        assert_abs_diff_eq!(q.x, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn angle_range_is_half_open() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert_abs_diff_eq!(normalize_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
    }

    fn pose_strategy() -> impl Strategy<Value = Pose2D> {
        (-50.0..50.0f64, -50.0..50.0f64, -10.0..10.0f64).prop_map(|(x, y, t)| Pose2D::new(x, y, t))
    }

    proptest! {
        #[test]
        fn compose_matches_matrix_oracle(a in pose_strategy(), b in pose_strategy()) {
            let m = hom(&a) * hom(&b);
            let c = a.compose(&b);
            prop_assert!((c.x - m[(0, 2)]).abs() < 1e-9);
            prop_assert!((c.y - m[(1, 2)]).abs() < 1e-9);
            prop_assert!((c.theta.cos() - m[(0, 0)]).abs() < 1e-9);
            prop_assert!((c.theta.sin() - m[(1, 0)]).abs() < 1e-9);
            prop_assert!(c.theta > -PI && c.theta <= PI);
        }

        #[test]
        fn apply_matches_matrix_oracle(a in pose_strategy(), px in -30.0..30.0f64, py in -30.0..30.0f64) {
            let v = hom(&a) * nalgebra::Vector3::new(px, py, 1.0);
            let q = a.apply(&Vec2::new(px, py));
            prop_assert!((q.x - v.x).abs() < 1e-9 && (q.y - v.y).abs() < 1e-9);
        }

        #[test]
        fn inverse_is_two_sided(a in pose_strategy()) {
            let l = a.compose(&a.inverse());
            let r = a.inverse().compose(&a);
            for p in [l, r] {
                prop_assert!(p.x.abs() < 1e-9 && p.y.abs() < 1e-9 && p.theta.abs() < 1e-9);
            }
        }

        #[test]
        fn compose_is_associative(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.x - r.x).abs() < 1e-9 && (l.y - r.y).abs() < 1e-9);
            prop_assert!(normalize_angle(l.theta - r.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn single_source_distance() {
        let mut g = OccupancyGrid::new(0.1, 11, 11, Pose2D::identity());
        g.set(5, 5, CellClass::Wall);
        let dm = distance_transform(&g, CellClass::Wall, 5.0).unwrap();
        assert_abs_diff_eq!(dm.d(0, 0), 0.1 * 50f64.sqrt(), epsilon = 1e-6);
        assert_eq!(dm.d(5, 5), 0.0);
        // single source: central-difference gradient is bounded by 1
        for j in 0..11 {
            for i in 0..11 {
                assert!(dm.grad(i, j).norm() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn missing_class_is_flagged() {
        let mut g = OccupancyGrid::new(0.2, 8, 6, Pose2D::identity());
        g.set(1, 1, CellClass::Wall);
        assert_eq!(
            distance_transform(&g, CellClass::Curb, 5.0),
            Err(GeometryError::NoSourceCells(CellClass::Curb))
        );
        let dm = distance_transform_flagged(&g, CellClass::Curb, 5.0);
        assert!(dm.no_source);
        for j in 0..6 {
            for i in 0..8 {
                assert_eq!(dm.d(i, j), 5.0);
                assert_eq!(dm.grad(i, j), Vec2::zeros());
            }
        }
    }

    #[test]
    fn truncation_caps_distance() {
        let mut g = OccupancyGrid::new(0.5, 40, 3, Pose2D::identity());
        g.set(0, 1, CellClass::Wall);
        let dm = distance_transform(&g, CellClass::Wall, 2.0).unwrap();
        assert_abs_diff_eq!(dm.d(4, 1), 2.0, epsilon = 1e-12);
        assert_eq!(dm.d(30, 1), 2.0);
        assert_eq!(dm.grad(30, 1), Vec2::zeros());
    }

    #[test]
    fn border_gradient_is_one_sided() {
        let mut g = OccupancyGrid::new(1.0, 5, 1, Pose2D::identity());
        g.set(0, 0, CellClass::Wall);
        let dm = distance_transform(&g, CellClass::Wall, 10.0).unwrap();
        assert_abs_diff_eq!(dm.grad(4, 0).x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dm.grad(0, 0).x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dm.grad(2, 0).x, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sample_matches_cells_at_centers() {
        let mut g = OccupancyGrid::new(0.2, 20, 20, Pose2D::new(-2.0, -2.0, 0.4));
        g.set(3, 7, CellClass::Wall);
        g.set(15, 12, CellClass::Wall);
        let dm = distance_transform(&g, CellClass::Wall, 5.0).unwrap();
        for (i, j) in [(0, 0), (5, 5), (10, 12), (19, 19)] {
            let (d, _) = dm.sample(&g.cell_center(i, j)).unwrap();
            assert_abs_diff_eq!(d, dm.d(i, j), epsilon = 1e-9);
        }
        assert!(dm.sample(&Vec2::new(100.0, 0.0)).is_none());
    }

    #[test]
    fn iou_self_and_disjoint() {
        let mut a = OccupancyGrid::new(0.2, 30, 30, Pose2D::identity());
        for i in 5..20 {
            a.set(i, 10, CellClass::Wall);
        }
        assert_abs_diff_eq!(grid_iou(&a, &a, &Pose2D::identity()).unwrap(), 1.0);
        let mut b = OccupancyGrid::new(0.2, 30, 30, Pose2D::identity());
        for j in 20..28 {
            b.set(25, j, CellClass::Curb);
        }
        assert_eq!(grid_iou(&a, &b, &Pose2D::identity()).unwrap(), 0.0);
        let empty = OccupancyGrid::new(0.2, 30, 30, Pose2D::identity());
        assert_eq!(
            grid_iou(&empty, &empty, &Pose2D::identity()),
            Err(GeometryError::EmptyGrids)
        );
    }

    #[test]
    fn grid_round_trip_and_corruption() {
        let mut g = OccupancyGrid::centered(0.2, 8.0);
        g.set(3, 4, CellClass::Wall);
        g.set(10, 11, CellClass::Curb);
        for i in 0..40 {
            g.set(i, 20, CellClass::Free);
        }
        let bytes = encode_grid(&g);
        let (back, used) = decode_grid(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(used, bytes.len());
        assert!(decode_grid(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_grid(&bad).is_err());
    }
}
