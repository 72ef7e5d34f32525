//! Corner features on bird's-eye grids, binary descriptor matching and robust
//! rigid estimation from correspondences.
//!
//! Grids are rendered to 8-bit intensity (see [`render_grid`]) so ordinary image
//! corner scores apply. Two detector flavours share the Harris response:
//! `OrientedBinary` steers its 256-bit descriptor by the intensity-centroid
//! angle (rotation invariant, used for global localization), `CornerScore`
//! keeps the descriptor axis-aligned (used for edge traversal, where the
//! relative rotation is known from the initial guess).

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CellClass, OccupancyGrid, Pose2D, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("no consensus: {inliers} inliers, {required} required")]
    NoConsensus { inliers: usize, required: usize },
    #[error("need at least 2 point pairs, got {0}")]
    TooFewPairs(usize),
}

pub const DESCRIPTOR_BITS: usize = 256;
pub type Descriptor = [u64; 4];

/// Rendering constants for the grid image.
pub const WALL_INTENSITY: u8 = 255;
pub const CURB_INTENSITY: u8 = 160;
pub const FREE_INTENSITY: u8 = 60;
pub const UNKNOWN_INTENSITY: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    OrientedBinary,
    CornerScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    /// Grid coordinates in cells (cell `(i, j)` spans `[i, i+1) x [j, j+1)`).
    pub pos: [f64; 2],
    pub descriptor: Descriptor,
    pub response: f64,
    /// Descriptor orientation, radians in grid axes.
    pub angle: f64,
}

impl Feature {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.pos[0], self.pos[1])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub oriented: Vec<Feature>,
    pub corners: Vec<Feature>,
}

impl FeatureSet {
    pub fn get(&self, kind: FeatureKind) -> &[Feature] {
        match kind {
            FeatureKind::OrientedBinary => &self.oriented,
            FeatureKind::CornerScore => &self.corners,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondence {
    pub ref_idx: usize,
    pub cand_idx: usize,
    pub dist: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureParams {
    pub max_n: usize,
    pub harris_k: f64,
    /// Responses below this fraction of the strongest are dropped.
    pub relative_threshold: f64,
    pub nms_radius: usize,
    /// Corners farther than this many cells from any wall or curb cell are
    /// dropped; free/unknown boundaries depend on the viewpoint.
    pub structure_radius: usize,
    /// Descriptor sampling radius, cells.
    pub patch_radius: usize,
    /// Structure-tensor window, cells.
    pub blur_sigma: f64,
    /// Smoothing applied before descriptor sampling, cells.
    pub descriptor_sigma: f64,
    pub ratio_max: f64,
    /// Hamming distances above this never match.
    pub max_hamming: u32,
    /// Consensus inlier tolerance, cells.
    pub inlier_tol_cells: f64,
    pub min_inliers: usize,
    pub ransac_iters: usize,
    pub seed: u64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            max_n: 500,
            harris_k: 0.04,
            relative_threshold: 1e-3,
            nms_radius: 2,
            structure_radius: 2,
            patch_radius: 40,
            blur_sigma: 1.5,
            descriptor_sigma: 4.0,
            ratio_max: 0.9,
            max_hamming: 80,
            inlier_tol_cells: 3.0,
            min_inliers: 5,
            ransac_iters: 1000,
            seed: 0,
        }
    }
}

/// Single-channel float image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Zero outside the image.
    #[inline]
    fn at_or_zero(&self, x: isize, y: isize) -> f32 {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            0.0
        } else {
            self.at(x as usize, y as usize)
        }
    }

    #[inline]
    fn at_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.at(x, y)
    }
}

pub fn render_grid(grid: &OccupancyGrid) -> Image {
    let data = grid
        .cells
        .iter()
        .map(|c| match c {
            CellClass::Wall => WALL_INTENSITY,
            CellClass::Curb => CURB_INTENSITY,
            CellClass::Free => FREE_INTENSITY,
            CellClass::Unknown => UNKNOWN_INTENSITY,
        } as f32)
        .collect();
    Image {
        width: grid.width,
        height: grid.height,
        data,
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * img.at_clamped(x as isize + t as isize - r, y as isize);
            }
            tmp[y * w + x] = acc;
        }
    }
    let tmp = Image {
        width: w,
        height: h,
        data: tmp,
    };
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * tmp.at_clamped(x as isize, y as isize + t as isize - r);
            }
            out[y * w + x] = acc;
        }
    }
    Image {
        width: w,
        height: h,
        data: out,
    }
}

/// Harris corner response `det(M) - k tr(M)^2` of the Gaussian-weighted
/// structure tensor built from Sobel gradients.
pub fn harris_response(img: &Image, k: f64, sigma: f64) -> Image {
    let (w, h) = (img.width, img.height);
    let mut ixx = vec![0f32; w * h];
    let mut iyy = vec![0f32; w * h];
    let mut ixy = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let p = |dx: isize, dy: isize| img.at_clamped(xi + dx, yi + dy);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1)) / 8.0;
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1)) / 8.0;
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let blur = |d: Vec<f32>| {
        gaussian_blur(
            &Image {
                width: w,
                height: h,
                data: d,
            },
            sigma,
        )
        .data
    };
    let (sxx, syy, sxy) = (blur(ixx), blur(iyy), blur(ixy));
    let data = (0..w * h)
        .map(|i| {
            let (a, b, c) = (sxx[i] as f64, syy[i] as f64, sxy[i] as f64);
            (a * b - c * c - k * (a + b) * (a + b)) as f32
        })
        .collect();
    Image {
        width: w,
        height: h,
        data,
    }
}

/// Fixed-seed Gaussian test-pair layout; identical for every call with the
/// same radius so descriptors from different runs are comparable.
pub fn brief_pattern(radius: usize) -> Vec<[i8; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x000b_21ef_5eed);
    let normal = Normal::new(0.0, radius as f64 / 2.5).expect("valid sigma");
    let r = radius as f64;
    let draw = |rng: &mut ChaCha8Rng| loop {
        let (x, y): (f64, f64) = (normal.sample(rng), normal.sample(rng));
        if x * x + y * y <= r * r {
            return (x.round() as i8, y.round() as i8);
        }
    };
    let mut pat = Vec::with_capacity(DESCRIPTOR_BITS);
    while pat.len() < DESCRIPTOR_BITS {
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        if a != b {
            pat.push([a.0, a.1, b.0, b.1]);
        }
    }
    pat
}

/// Intensity-centroid orientation of the patch around `pos`.
fn patch_orientation(img: &Image, pos: &Vec2, radius: usize) -> f64 {
    let (cx, cy) = (pos.x.floor() as isize, pos.y.floor() as isize);
    let r = radius as isize;
    let (mut m10, mut m01) = (0f64, 0f64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let v = img.at_or_zero(cx + dx, cy + dy) as f64;
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    m01.atan2(m10)
}

/// 256-bit steered BRIEF descriptor on a pre-blurred image.
pub fn describe(blurred: &Image, pos: &Vec2, angle: f64, pattern: &[[i8; 4]]) -> Descriptor {
    let (s, c) = angle.sin_cos();
    let (cx, cy) = (pos.x.floor() + 0.5, pos.y.floor() + 0.5);
    let sample = |x: i8, y: i8| {
        let (x, y) = (x as f64, y as f64);
        let u = cx + c * x - s * y;
        let v = cy + s * x + c * y;
        blurred.at_or_zero(u.floor() as isize, v.floor() as isize)
    };
    let mut d = [0u64; 4];
    for (bit, p) in pattern.iter().enumerate() {
        if sample(p[0], p[1]) < sample(p[2], p[3]) {
            d[bit / 64] |= 1 << (bit % 64);
        }
    }
    d
}

#[inline]
pub fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Cells within `radius` (Chebyshev) of a wall or curb cell.
fn near_structure(grid: &OccupancyGrid, radius: usize) -> Vec<bool> {
    let (w, h) = (grid.width, grid.height);
    let r = radius as isize;
    // separable max filter: rows, then columns
    let occ: Vec<bool> = grid.cells.iter().map(|c| c.is_occupied()).collect();
    let mut rows = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = (x as isize - r).max(0) as usize;
            let hi = ((x as isize + r) as usize).min(w - 1);
            rows[y * w + x] = occ[y * w + lo..=y * w + hi].iter().any(|&b| b);
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        let lo = (y as isize - r).max(0) as usize;
        let hi = ((y as isize + r) as usize).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

/// Harris corners with non-maximum suppression and sub-cell refinement,
/// strongest first, described according to `kind`.
pub fn detect_features(grid: &OccupancyGrid, kind: FeatureKind, p: &FeatureParams) -> Vec<Feature> {
    if grid.is_empty() {
        return Vec::new();
    }
    let img = render_grid(grid);
    let resp = harris_response(&img, p.harris_k, p.blur_sigma);
    let max_r = resp.data.iter().cloned().fold(0f32, f32::max);
    if !(max_r > 1e-3) {
        return Vec::new();
    }
    let thr = (p.relative_threshold * max_r as f64) as f32;
    let (w, h) = (resp.width, resp.height);
    let near = near_structure(grid, p.structure_radius);
    let r = p.nms_radius as isize;
    let mut peaks: Vec<(f32, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = resp.at(x, y);
            if v <= thr || !near[y * w + x] {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if xx < 0 || yy < 0 || xx as usize >= w || yy as usize >= h {
                        continue;
                    }
                    let o = resp.at(xx as usize, yy as usize);
                    // ties go to the earlier pixel in raster order
                    if o > v || (o == v && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                peaks.push((v, x, y));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
    peaks.truncate(p.max_n);

    let blurred = gaussian_blur(&img, p.descriptor_sigma);
    let pattern = brief_pattern(p.patch_radius);
    peaks
        .into_iter()
        .map(|(v, x, y)| {
            let refine = |lo: f32, c: f32, hi: f32| {
                let den = lo - 2.0 * c + hi;
                if den.abs() > 1e-12 {
                    (0.5 * (lo - hi) / den).clamp(-0.5, 0.5) as f64
                } else {
                    0.0
                }
            };
            let (xi, yi) = (x as isize, y as isize);
            let ox = refine(resp.at_clamped(xi - 1, yi), v, resp.at_clamped(xi + 1, yi));
            let oy = refine(resp.at_clamped(xi, yi - 1), v, resp.at_clamped(xi, yi + 1));
            let pos = Vec2::new(x as f64 + 0.5 + ox, y as f64 + 0.5 + oy);
            let angle = match kind {
                FeatureKind::OrientedBinary => patch_orientation(&blurred, &pos, p.patch_radius),
                FeatureKind::CornerScore => 0.0,
            };
            Feature {
                pos: [pos.x, pos.y],
                descriptor: describe(&blurred, &pos, angle, &pattern),
                response: v as f64,
                angle,
            }
        })
        .collect()
}

/// Re-describes features with their orientation offset by `angle`, e.g. to
/// compare axis-aligned corner descriptors across a known rotation.
pub fn steer_features(grid: &OccupancyGrid, features: &[Feature], angle: f64, p: &FeatureParams) -> Vec<Feature> {
    let blurred = gaussian_blur(&render_grid(grid), p.descriptor_sigma);
    let pattern = brief_pattern(p.patch_radius);
    features
        .iter()
        .map(|f| {
            let a = f.angle + angle;
            Feature {
                descriptor: describe(&blurred, &f.pos(), a, &pattern),
                angle: a,
                ..f.clone()
            }
        })
        .collect()
}

/// Nearest-neighbour Hamming matching with a ratio test. Each candidate is
/// used at most once (the closest reference wins).
pub fn match_features(reference: &[Feature], candidate: &[Feature], p: &FeatureParams) -> Vec<Correspondence> {
    if reference.is_empty() || candidate.is_empty() {
        return Vec::new();
    }
    let mut best_for_cand: Vec<Option<Correspondence>> = vec![None; candidate.len()];
    for (ri, rf) in reference.iter().enumerate() {
        let (mut b1, mut b2, mut bi) = (u32::MAX, u32::MAX, 0usize);
        for (ci, cf) in candidate.iter().enumerate() {
            let d = hamming(&rf.descriptor, &cf.descriptor);
            if d < b1 {
                b2 = b1;
                b1 = d;
                bi = ci;
            } else if d < b2 {
                b2 = d;
            }
        }
        if b1 > p.max_hamming {
            continue;
        }
        if b2 != u32::MAX && (b1 as f64) >= p.ratio_max * b2 as f64 {
            continue;
        }
        let c = Correspondence {
            ref_idx: ri,
            cand_idx: bi,
            dist: b1,
        };
        match best_for_cand[bi] {
            Some(prev) if prev.dist <= b1 => {}
            _ => best_for_cand[bi] = Some(c),
        }
    }
    let mut out: Vec<Correspondence> = best_for_cand.into_iter().flatten().collect();
    out.sort_by_key(|c| c.ref_idx);
    out
}

/// Closed-form least-squares rigid fit mapping `src` onto `dst`.
pub fn procrustes_2d(pairs: &[(Vec2, Vec2)]) -> Option<Pose2D> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let cs = pairs.iter().map(|(s, _)| s).sum::<Vec2>() / n;
    let cd = pairs.iter().map(|(_, d)| d).sum::<Vec2>() / n;
    let (mut sdot, mut scross) = (0.0, 0.0);
    for (s, d) in pairs {
        let (a, b) = (s - cs, d - cd);
        sdot += a.dot(&b);
        scross += a.x * b.y - a.y * b.x;
    }
    let theta = if sdot == 0.0 && scross == 0.0 {
        0.0
    } else {
        scross.atan2(sdot)
    };
    let (s, c) = theta.sin_cos();
    let rotated = Vec2::new(c * cs.x - s * cs.y, s * cs.x + c * cs.y);
    let t = cd - rotated;
    Some(Pose2D::new(t.x, t.y, theta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidEstimate {
    pub pose: Pose2D,
    pub inliers: Vec<usize>,
}

/// Two-point sample consensus followed by a least-squares refit on the
/// inliers. `pairs` are `(reference, candidate)` points in meters; the pose maps
/// reference into candidate.
pub fn estimate_initial_transform(
    pairs: &[(Vec2, Vec2)],
    inlier_tol: f64,
    min_inliers: usize,
    iters: usize,
    seed: u64,
) -> Result<RigidEstimate, FeatureError> {
    if pairs.len() < 2 {
        return Err(FeatureError::TooFewPairs(pairs.len()));
    }
    let tol2 = inlier_tol * inlier_tol;
    let inliers_of = |x: &Pose2D| -> Vec<usize> {
        (0..pairs.len())
            .filter(|&k| (x.apply(&pairs[k].0) - pairs[k].1).norm_squared() <= tol2)
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..iters {
        let s = index::sample(&mut rng, pairs.len(), 2);
        let (a, b) = (pairs[s.index(0)], pairs[s.index(1)]);
        let (lr, lc) = ((a.0 - b.0).norm(), (a.1 - b.1).norm());
        if lr < inlier_tol || (lr - lc).abs() > 2.0 * inlier_tol {
            continue;
        }
        let Some(x) = procrustes_2d(&[a, b]) else { continue };
        let inl = inliers_of(&x);
        if inl.len() > best.len() {
            best = inl;
        }
    }
    if best.len() < min_inliers.max(2) {
        return Err(FeatureError::NoConsensus {
            inliers: best.len(),
            required: min_inliers,
        });
    }
    let mut inliers = best;
    let mut pose = Pose2D::identity();
    for _ in 0..3 {
        let subset: Vec<(Vec2, Vec2)> = inliers.iter().map(|&k| pairs[k]).collect();
        pose = procrustes_2d(&subset).expect("non-empty inlier set");
        let next = inliers_of(&pose);
        if next == inliers || next.len() < min_inliers.max(2) {
            break;
        }
        inliers = next;
    }
    Ok(RigidEstimate { pose, inliers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn l_corner_grid() -> OccupancyGrid {
        let mut g = OccupancyGrid::new(0.2, 80, 80, Pose2D::identity());
        for k in 0..80 * 80 {
            g.cells[k] = CellClass::Free;
        }
        for i in 30..60 {
            g.set(i, 30, CellClass::Wall);
        }
        for j in 30..60 {
            g.set(30, j, CellClass::Wall);
        }
        g
    }

    #[test]
    fn uniform_grid_has_no_features() {
        let mut g = OccupancyGrid::new(0.2, 60, 60, Pose2D::identity());
        g.cells.iter_mut().for_each(|c| *c = CellClass::Free);
        for kind in [FeatureKind::OrientedBinary, FeatureKind::CornerScore] {
            assert!(detect_features(&g, kind, &FeatureParams::default()).is_empty());
        }
    }

    #[test]
    fn l_corner_is_detected() {
        let g = l_corner_grid();
        let f = detect_features(&g, FeatureKind::CornerScore, &FeatureParams::default());
        assert!(!f.is_empty());
        let vertex = Vec2::new(30.5, 30.5);
        assert!(f.iter().any(|f| (f.pos() - vertex).norm() <= 2.0));
        assert!(f.windows(2).all(|w| w[0].response >= w[1].response));
    }

    fn random_structured_grid(seed: u64, n: usize) -> OccupancyGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = OccupancyGrid::new(0.2, n, n, Pose2D::identity());
        g.cells.iter_mut().for_each(|c| *c = CellClass::Free);
        for _ in 0..12 {
            let (x0, y0) = (rng.random_range(10..n - 30), rng.random_range(10..n - 30));
            let (w, h) = (rng.random_range(6..20), rng.random_range(6..20));
            for i in x0..x0 + w {
                g.set(i, y0, CellClass::Wall);
                g.set(i, y0 + h, CellClass::Wall);
            }
            for j in y0..=y0 + h {
                g.set(x0, j, CellClass::Wall);
                g.set(x0 + w, j, CellClass::Wall);
            }
        }
        g
    }

    fn rotate90(g: &OccupancyGrid) -> OccupancyGrid {
        // (i, j) -> (n - 1 - j, i)
        let n = g.width;
        let mut r = g.clone();
        for j in 0..n {
            for i in 0..n {
                r.set(n - 1 - j, i, g.get(i, j));
            }
        }
        r
    }

    #[test]
    fn oriented_descriptors_survive_quarter_turn() {
        let p = FeatureParams::default();
        let (mut total, mut good) = (0, 0);
        for seed in 0..3 {
            let g = random_structured_grid(seed, 160);
            let r = rotate90(&g);
            let fa = detect_features(&g, FeatureKind::OrientedBinary, &p);
            let fb = detect_features(&r, FeatureKind::OrientedBinary, &p);
            let n = g.width as f64;
            for a in &fa {
                let expect = Vec2::new(n - a.pos[1], a.pos[0]);
                if let Some(b) = fb.iter().find(|b| (b.pos() - expect).norm() < 1.0) {
                    total += 1;
                    if hamming(&a.descriptor, &b.descriptor) <= p.max_hamming {
                        good += 1;
                    }
                }
            }
        }
        assert!(total > 30, "only {total} corresponding corners");
        assert!(good as f64 >= 0.8 * total as f64, "{good}/{total}");
    }

    fn random_features(n: usize, seed: u64) -> Vec<Feature> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Feature {
                pos: [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)],
                descriptor: [rng.random(), rng.random(), rng.random(), rng.random()],
                response: 1.0,
                angle: 0.0,
            })
            .collect()
    }

    #[test]
    fn self_match_is_complete() {
        let f = random_features(100, 1);
        let m = match_features(&f, &f, &FeatureParams::default());
        assert_eq!(m.len(), f.len());
        assert!(m.iter().all(|c| c.dist == 0 && c.ref_idx == c.cand_idx));
        assert!(match_features(&f, &[], &FeatureParams::default()).is_empty());
    }

    #[test]
    fn planted_matches_precision_recall() {
        let p = FeatureParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reference = random_features(200, 2);
        let mut cand = Vec::new();
        let mut truth = std::collections::HashMap::new();
        for (k, f) in reference.iter().enumerate().take(150) {
            let mut d = f.descriptor;
            for _ in 0..20 {
                let b: usize = rng.random_range(0..256);
                d[b / 64] ^= 1 << (b % 64);
            }
            truth.insert(k, cand.len());
            cand.push(Feature {
                descriptor: d,
                ..f.clone()
            });
        }
        cand.extend(random_features(300, 3));
        let m = match_features(&reference, &cand, &p);
        let correct = m.iter().filter(|c| truth.get(&c.ref_idx) == Some(&c.cand_idx)).count();
        let precision = correct as f64 / m.len() as f64;
        let recall = correct as f64 / truth.len() as f64;
        assert!(precision >= 0.9 && recall >= 0.9, "p={precision} r={recall}");
        assert!(m.len() <= reference.len().min(cand.len()));
    }

    #[test]
    fn procrustes_is_exact_on_clean_pairs() {
        let x = Pose2D::new(1.0, 0.5, 10f64.to_radians());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<(Vec2, Vec2)> = (0..30)
            .map(|_| {
                let p = Vec2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
                (p, x.apply(&p))
            })
            .collect();
        let e = estimate_initial_transform(&pairs, 0.6, 5, 200, 0).unwrap();
        let (dt, dr) = e.pose.error_to(&x);
        assert!(dt < 1e-6 && dr < 1e-6);
        assert_eq!(e.inliers.len(), 30);
    }

    #[test]
    fn identity_pairs() {
        let pairs: Vec<(Vec2, Vec2)> = (0..10)
            .map(|k| {
                let p = Vec2::new(k as f64, (k * k) as f64 * 0.3);
                (p, p)
            })
            .collect();
        let e = estimate_initial_transform(&pairs, 0.6, 5, 100, 0).unwrap();
        assert_abs_diff_eq!(e.pose.translation_norm(), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e.pose.theta, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn planted_transform_with_outliers() {
        let x = Pose2D::new(1.0, 0.5, 10f64.to_radians());
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let noise = Normal::new(0.0, 0.02).unwrap();
            let mut pairs = Vec::new();
            for k in 0..60 {
                let p = Vec2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
                if k % 10 < 3 {
                    pairs.push((
                        p,
                        Vec2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)),
                    ));
                } else {
                    let q = x.apply(&p) + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                    pairs.push((p, q));
                }
            }
            let e = estimate_initial_transform(&pairs, 0.6, 5, 1000, trial).unwrap();
            let (dt, dr) = e.pose.error_to(&x);
            assert!(dt < 0.05 && dr.to_degrees() < 0.5, "trial {trial}: {dt} {dr}");
        }
    }

    #[test]
    fn random_pairings_have_no_consensus() {
        for trial in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let pairs: Vec<(Vec2, Vec2)> = (0..100)
                .map(|_| {
                    (
                        Vec2::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)),
                        Vec2::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)),
                    )
                })
                .collect();
            assert!(matches!(
                estimate_initial_transform(&pairs, 0.6, 5, 1000, trial),
                Err(FeatureError::NoConsensus { .. })
            ));
        }
    }
}
