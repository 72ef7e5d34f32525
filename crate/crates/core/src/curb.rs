//! Curb detection from a single ring-structured LiDAR scan.
//!
//! Flat-looking points (low range variance along the azimuth) are sampled with
//! a preference for the vehicle's center line, a ground plane is fitted with
//! RANSAC, and the leveled scan is turned into range-view masks. Curbs are the
//! edges of the ground mask.

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Unit};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PointCloud, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurbError {
    #[error("range image has no valid returns")]
    EmptyImage,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("point cloud has no ring/azimuth structure")]
    Unstructured,
    #[error("invalid curb parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurbParams {
    /// Sliding window length along the azimuth, in bins.
    pub std_window: usize,
    /// Maximum windowed range variance, m^2.
    pub sigma_threshold: f64,
    /// Center-line sampling width, m.
    pub sigma_y: f64,
    pub sample_size: usize,
    /// RANSAC inlier distance, m.
    pub d_threshold: f64,
    pub ransac_iters: usize,
    /// Ground mask height, m.
    pub curb_height: f64,
    pub upsample_factor: usize,
    pub dilate_w: usize,
    pub dilate_h: usize,
    /// Largest accepted angle between the ground normal and the sensor z axis, degrees.
    pub max_tilt_deg: f64,
    pub seed: u64,
}

impl Default for CurbParams {
    fn default() -> Self {
        Self {
            std_window: 11,
            sigma_threshold: 0.05,
            sigma_y: 3.0,
            sample_size: 2000,
            d_threshold: 0.05,
            ransac_iters: 200,
            curb_height: 0.1,
            upsample_factor: 3,
            dilate_w: 50,
            dilate_h: 7,
            max_tilt_deg: 30.0,
            seed: 0,
        }
    }
}

impl CurbParams {
    pub fn validate(&self) -> Result<(), CurbError> {
        let positive = self.std_window > 0
            && self.sigma_threshold > 0.0
            && self.sigma_y > 0.0
            && self.sample_size > 0
            && self.d_threshold > 0.0
            && self.ransac_iters > 0
            && self.curb_height > 0.0
            && self.dilate_w > 0
            && self.dilate_h > 0
            && self.max_tilt_deg > 0.0
            && self.max_tilt_deg <= 90.0;
        if !positive || self.upsample_factor < 1 {
            return Err(CurbError::InvalidParams("all parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Range view of a scan: `rows` rings by `cols` azimuth bins, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub rows: usize,
    pub cols: usize,
    /// Meters; 0 marks a pixel without a return.
    pub range: Vec<f64>,
    /// Source point of every pixel.
    pub index: Vec<Option<usize>>,
}

impl RangeImage {
    pub fn from_cloud(cloud: &PointCloud) -> Result<Self, CurbError> {
        let s = cloud.structure.as_ref().ok_or(CurbError::Unstructured)?;
        let (rows, cols) = (s.rings as usize, s.azimuth_bins as usize);
        let mut range = vec![0.0; rows * cols];
        let mut index = vec![None; rows * cols];
        for (k, p) in cloud.points.iter().enumerate() {
            let (r, c) = (s.ring[k] as usize, s.azimuth[k] as usize);
            if r >= rows || c >= cols {
                return Err(CurbError::DegenerateInput(format!("point {k} outside ring structure")));
            }
            range[r * cols + c] = p.norm();
            index[r * cols + c] = Some(k);
        }
        Ok(Self {
            rows,
            cols,
            range,
            index,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.index.iter().filter(|i| i.is_some()).count()
    }
}

/// Indices of points whose range variance over a centered azimuth window is
/// below `sigma_threshold`. The window wraps around the full revolution and only
/// valid returns enter the variance.
pub fn range_std_window_filter(ri: &RangeImage, p: &CurbParams) -> Result<Vec<usize>, CurbError> {
    if ri.valid_count() == 0 {
        return Err(CurbError::EmptyImage);
    }
    if ri.cols < p.std_window {
        return Err(CurbError::DegenerateInput("fewer columns than the window".into()));
    }
    let half = (p.std_window / 2) as isize;
    let mut keep = Vec::new();
    for r in 0..ri.rows {
        let row = &ri.range[r * ri.cols..(r + 1) * ri.cols];
        for c in 0..ri.cols {
            let Some(src) = ri.index[r * ri.cols + c] else { continue };
            let (mut n, mut sum, mut sum2) = (0usize, 0.0, 0.0);
            for dc in -half..=half {
                let cc = (c as isize + dc).rem_euclid(ri.cols as isize) as usize;
                let v = row[cc];
                if ri.index[r * ri.cols + cc].is_some() {
                    n += 1;
                    sum += v;
                    sum2 += v * v;
                }
            }
            let mean = sum / n as f64;
            let var = (sum2 / n as f64 - mean * mean).max(0.0);
            if var < p.sigma_threshold {
                keep.push(src);
            }
        }
    }
    Ok(keep)
}

/// Draws `n` distinct points with weights `exp(-y^2 / (2 sigma_y^2))`; returns
/// indices into `points`. Asking for more than available returns every index.
pub fn weighted_center_sample(points: &[Vec3], sigma_y: f64, n: usize, seed: u64) -> Vec<usize> {
    if n >= points.len() {
        return (0..points.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two_s2 = 2.0 * sigma_y * sigma_y;
    let weight = |i: usize| (-(points[i].y * points[i].y) / two_s2).exp().max(1e-300);
    let mut picked: Vec<usize> = index::sample_weighted(&mut rng, points.len(), weight, n)
        .expect("weights are positive and finite")
        .into_iter()
        .collect();
    picked.sort_unstable();
    picked
}

/// Fitted ground plane and the rigid transform that levels it.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    /// Unit normal with non-negative z.
    pub normal: Vec3,
    /// Plane offset: `normal . p + offset = 0`.
    pub offset: f64,
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
    pub inliers: Vec<usize>,
}

impl PlaneFit {
    /// Maps a point into the leveled frame (plane at z = 0, normal along +z).
    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn identity() -> Self {
        Self {
            normal: Vec3::z(),
            offset: 0.0,
            rotation: Rotation3::identity(),
            translation: Vec3::zeros(),
            inliers: Vec::new(),
        }
    }
}

fn least_squares_plane(points: &[Vec3], idx: &[usize]) -> Option<(Vec3, f64)> {
    if idx.len() < 3 {
        return None;
    }
    let centroid = idx.iter().map(|&i| points[i]).sum::<Vec3>() / idx.len() as f64;
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = points[i] - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    let mut n: Vec3 = eig.eigenvectors.column(k).into_owned();
    if n.z < 0.0 {
        n = -n;
    }
    Some((n, -n.dot(&centroid)))
}

/// RANSAC plane fit with a least-squares refinement on the consensus set.
pub fn ransac_fit_plane(points: &[Vec3], d_threshold: f64, iters: usize, seed: u64) -> Result<PlaneFit, CurbError> {
    ransac_fit_plane_tilted(points, d_threshold, iters, seed, 90.0)
}

/// [`ransac_fit_plane`] restricted to hypotheses whose normal is within
/// `max_tilt_deg` of +z. Facades can out-vote the road in the flat sample.
pub fn ransac_fit_plane_tilted(
    points: &[Vec3],
    d_threshold: f64,
    iters: usize,
    seed: u64,
    max_tilt_deg: f64,
) -> Result<PlaneFit, CurbError> {
    let min_nz = max_tilt_deg.to_radians().cos() - 1e-12;
    if points.len() < 3 {
        return Err(CurbError::DegenerateInput("fewer than 3 points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = points.iter().map(|p| p.norm()).fold(1.0, f64::max);
    // truncated quadratic (MSAC) score: among planes with similar support the
    // tighter fit wins, which keeps road+far-sidewalk compromises out
    let t2 = d_threshold * d_threshold;
    let mut best: Option<(f64, Vec3, f64)> = None;
    let score = |n: &Vec3, d: f64| points.iter().map(|p| (n.dot(p) + d).powi(2).min(t2)).sum::<f64>();
    for _ in 0..iters {
        let s = index::sample(&mut rng, points.len(), 3);
        let (a, b, c) = (points[s.index(0)], points[s.index(1)], points[s.index(2)]);
        let cross = (b - a).cross(&(c - a));
        if cross.norm() < 1e-9 * scale * scale {
            continue;
        }
        let mut n = cross.normalize();
        if n.z < 0.0 {
            n = -n;
        }
        if n.z < min_nz {
            continue;
        }
        let d = -n.dot(&a);
        let sc = score(&n, d);
        if best.is_none_or(|(bs, _, _)| sc < bs) {
            best = Some((sc, n, d));
        }
    }
    let (_, mut n, mut d) = match best {
        Some(b) => b,
        None => {
            // every sample was degenerate: check exhaustively for collinearity
            let a = points[0];
            let far = points
                .iter()
                .max_by(|p, q| (*p - a).norm().total_cmp(&(*q - a).norm()))
                .unwrap();
            let dir = (far - a).try_normalize(1e-12);
            let collinear = dir.is_none_or(|u| points.iter().all(|p| (p - a).cross(&u).norm() < 1e-9 * scale));
            if collinear {
                return Err(CurbError::DegenerateInput("points are collinear".into()));
            }
            least_squares_plane(points, &(0..points.len()).collect::<Vec<_>>())
                .map(|(n, d)| (0.0, n, d))
                .ok_or_else(|| CurbError::DegenerateInput("no plane".into()))?
        }
    };
    if n.z < min_nz {
        return Err(CurbError::DegenerateInput("no plane within the tilt limit".into()));
    }
    let mut inliers: Vec<usize> = (0..points.len())
        .filter(|&i| (n.dot(&points[i]) + d).abs() < d_threshold)
        .collect();
    if let Some((rn, rd)) = least_squares_plane(points, &inliers).filter(|(rn, _)| rn.z >= min_nz) {
        n = rn;
        d = rd;
        inliers = (0..points.len())
            .filter(|&i| (n.dot(&points[i]) + d).abs() < d_threshold)
            .collect();
    }
    let rotation = Rotation3::rotation_between(&n, &Vec3::z()).unwrap_or_else(|| {
        // n == -z cannot happen (normal is oriented up); n == z gives identity
        Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::x()), std::f64::consts::PI)
    });
    Ok(PlaneFit {
        normal: n,
        offset: d,
        rotation,
        translation: Vec3::new(0.0, 0.0, d),
        inliers,
    })
}

/// Output of [`detect_curbs`].
#[derive(Debug, Clone)]
pub struct CurbDetection {
    /// Curb points in the leveled robot frame.
    pub points: Vec<Vec3>,
    /// Source indices of `points` in the input cloud.
    pub indices: Vec<usize>,
    pub plane: PlaneFit,
    /// Ground mask after exclusion, upsampled range view (`rows * f` x `cols`).
    pub mask: Vec<bool>,
    pub mask_rows: usize,
    pub mask_cols: usize,
}

impl CurbDetection {
    /// The input cloud mapped into the leveled frame.
    pub fn level_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|p| self.plane.transform(p)).collect(),
            structure: cloud.structure.clone(),
        }
    }
}

/// Binary dilation with a `w x h` box (columns wrap around the revolution).
fn dilate(mask: &[bool], rows: usize, cols: usize, w: usize, h: usize) -> Vec<bool> {
    let (hw, hh) = ((w / 2) as isize, (h / 2) as isize);
    let (lo_w, hi_w) = (-hw, w as isize - 1 - hw);
    let (lo_h, hi_h) = (-hh, h as isize - 1 - hh);
    let mut horiz = vec![false; mask.len()];
    for r in 0..rows {
        for c in 0..cols {
            if !mask[r * cols + c] {
                continue;
            }
            for dc in lo_w..=hi_w {
                let cc = (c as isize + dc).rem_euclid(cols as isize) as usize;
                horiz[r * cols + cc] = true;
            }
        }
    }
    let mut out = vec![false; mask.len()];
    for r in 0..rows {
        for c in 0..cols {
            if !horiz[r * cols + c] {
                continue;
            }
            for dr in lo_h..=hi_h {
                let rr = r as isize + dr;
                if rr >= 0 && (rr as usize) < rows {
                    out[rr as usize * cols + c] = true;
                }
            }
        }
    }
    out
}

/// Full curb pipeline: variance filter, center-weighted sampling, plane fit,
/// leveling, row upsampling, ground / tall-object masks, and mask edges.
pub fn detect_curbs(cloud: &PointCloud, p: &CurbParams) -> Result<CurbDetection, CurbError> {
    p.validate()?;
    let ri = RangeImage::from_cloud(cloud)?;
    let flat = range_std_window_filter(&ri, p)?;
    let flat_pts: Vec<Vec3> = flat.iter().map(|&i| cloud.points[i]).collect();
    let sample: Vec<Vec3> = weighted_center_sample(&flat_pts, p.sigma_y, p.sample_size, p.seed)
        .into_iter()
        .map(|i| flat_pts[i])
        .collect();
    let plane = ransac_fit_plane_tilted(&sample, p.d_threshold, p.ransac_iters, p.seed, p.max_tilt_deg)?;
    let leveled: Vec<Vec3> = cloud.points.iter().map(|q| plane.transform(q)).collect();

    let f = p.upsample_factor;
    let (rows, cols) = (ri.rows * f, ri.cols);
    let src = |r: usize, c: usize| ri.index[(r / f) * cols + c];
    let mut valid = vec![false; rows * cols];
    let mut ground = vec![false; rows * cols];
    let mut tall = vec![false; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if let Some(k) = src(r, c) {
                let z = leveled[k].z;
                valid[r * cols + c] = true;
                ground[r * cols + c] = z < p.curb_height;
                tall[r * cols + c] = z.abs() > 3.0 * p.curb_height;
            }
        }
    }
    let excluded = dilate(&tall, rows, cols, p.dilate_w, p.dilate_h);
    let mask: Vec<bool> = (0..rows * cols).map(|k| ground[k] && !excluded[k]).collect();

    // a ground pixel is an edge when an azimuth neighbour with a valid return is above the
    // ground threshold and not inside an excluded tall-object zone
    let raised = |r: isize, c: isize| -> bool {
        if r < 0 || r as usize >= rows {
            return false;
        }
        let c = c.rem_euclid(cols as isize) as usize;
        let k = r as usize * cols + c;
        valid[k] && !ground[k] && !excluded[k]
    };
    let mut seen = vec![false; cloud.points.len()];
    let mut indices = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !mask[r * cols + c] {
                continue;
            }
            let (ri_, ci) = (r as isize, c as isize);
            let edge = raised(ri_, ci - 1) || raised(ri_, ci + 1);
            if edge {
                let k = src(r, c).expect("mask pixels are valid");
                if !seen[k] {
                    seen[k] = true;
                    indices.push(k);
                }
            }
        }
    }
    indices.sort_unstable();
    Ok(CurbDetection {
        points: indices.iter().map(|&k| leveled[k]).collect(),
        indices,
        plane,
        mask,
        mask_rows: rows,
        mask_cols: cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RingStructure;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn synthetic_image(rows: usize, cols: usize, base: f64) -> RangeImage {
        RangeImage {
            rows,
            cols,
            range: vec![base; rows * cols],
            index: (0..rows * cols).map(Some).collect(),
        }
    }

    #[test]
    fn spike_rejects_exactly_its_window() {
        let p = CurbParams::default();
        let mut ri = synthetic_image(2, 64, 10.0);
        let spike = 30;
        for r in 0..2 {
            ri.range[r * 64 + spike] = 12.0;
        }
        // direct variance of a window holding one 2 m outlier among 11
        let n = p.std_window as f64;
        let var = 4.0 * (n - 1.0) / (n * n);
        assert!(var > p.sigma_threshold);
        let kept = range_std_window_filter(&ri, &p).unwrap();
        let rejected: Vec<usize> = (0..128).filter(|k| !kept.contains(k)).collect();
        let expected: Vec<usize> = (0..2)
            .flat_map(|r| (spike - 5..=spike + 5).map(move |c| r * 64 + c))
            .collect();
        assert_eq!(rejected, expected);
    }

    #[test]
    fn empty_image_is_an_error() {
        let ri = RangeImage {
            rows: 1,
            cols: 16,
            range: vec![0.0; 16],
            index: vec![None; 16],
        };
        assert_eq!(
            range_std_window_filter(&ri, &CurbParams::default()),
            Err(CurbError::EmptyImage)
        );
    }

    #[test]
    fn sampling_prefers_center_line() {
        let mut pts = Vec::new();
        for i in 0..2000 {
            pts.push(Vec3::new(i as f64 * 0.01, 0.0, 0.0));
            pts.push(Vec3::new(i as f64 * 0.01, 10.0, 0.0));
        }
        let s = weighted_center_sample(&pts, 1.0, 1000, 4);
        assert_eq!(s.len(), 1000);
        let near = s.iter().filter(|&&i| pts[i].y == 0.0).count();
        assert!(near as f64 >= 0.95 * 1000.0);
        assert_eq!(s, weighted_center_sample(&pts, 1.0, 1000, 4));
    }

    #[test]
    fn sampling_degenerate_weights_and_small_sets() {
        let pts: Vec<Vec3> = (0..50).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(weighted_center_sample(&pts, 1.0, 20, 1).len(), 20);
        assert_eq!(weighted_center_sample(&pts, 1.0, 80, 1), (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn plane_already_level_is_identity() {
        let pts: Vec<Vec3> = (0..100)
            .map(|i| Vec3::new((i % 10) as f64, (i / 10) as f64 * 0.7, 0.0))
            .collect();
        let fit = ransac_fit_plane(&pts, 0.05, 50, 0).unwrap();
        assert!((fit.rotation.matrix() - Matrix3::identity()).norm() < 1e-6);
        assert!(fit.translation.norm() < 1e-6);
    }

    #[test]
    fn sloped_plane_normal_is_recovered() {
        let pts: Vec<Vec3> = (0..400)
            .map(|i| {
                let (x, y) = ((i % 20) as f64 - 10.0, (i / 20) as f64 - 10.0);
                Vec3::new(x, y, 0.1 * x)
            })
            .collect();
        let fit = ransac_fit_plane(&pts, 0.05, 200, 3).unwrap();
        let analytic = Vec3::new(-0.1, 0.0, 1.0).normalize();
        let angle = fit.normal.dot(&analytic).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 0.1, "angle {angle}");
        for q in &pts {
            assert_abs_diff_eq!(fit.transform(q).z, 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn plane_inlier_recall_with_outliers() {
        let normal = Vec3::new(0.05, -0.08, 1.0).normalize();
        let offset = -0.3;
        let mut worst: f64 = 1.0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let mut pts = Vec::new();
            let mut truth = Vec::new();
            for k in 0..700 {
                let (x, y): (f64, f64) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
                let z = -(normal.x * x + normal.y * y + offset) / normal.z;
                pts.push(Vec3::new(x, y, z));
                truth.push(k);
            }
            for _ in 0..300 {
                pts.push(Vec3::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-5.0..5.0),
                ));
            }
            let fit = ransac_fit_plane(&pts, 0.05, 200, trial).unwrap();
            let recall = truth.iter().filter(|k| fit.inliers.contains(k)).count() as f64 / truth.len() as f64;
            worst = worst.min(recall);
        }
        assert!(worst >= 0.99, "worst recall {worst}");
    }

    #[test]
    fn tilt_limit_prefers_road_over_larger_facade() {
        let mut pts = Vec::new();
        for i in 0..300 {
            pts.push(Vec3::new((i % 30) as f64 * 0.5, (i / 30) as f64 * 0.5 - 2.5, -1.8));
        }
        for i in 0..600 {
            pts.push(Vec3::new((i % 40) as f64 * 0.5, 8.0, (i / 40) as f64 * 0.4 - 1.8));
        }
        let free = ransac_fit_plane(&pts, 0.05, 200, 1).unwrap();
        assert!(free.normal.z < 0.1);
        let fit = ransac_fit_plane_tilted(&pts, 0.05, 200, 1, 30.0).unwrap();
        assert!(fit.normal.z > 0.999);
        assert_abs_diff_eq!(fit.offset, 1.8, epsilon = 1e-9);
        let wall_only: Vec<Vec3> = pts[300..].to_vec();
        assert!(matches!(
            ransac_fit_plane_tilted(&wall_only, 0.05, 200, 1, 30.0),
            Err(CurbError::DegenerateInput(_))
        ));
    }

    #[test]
    fn degenerate_plane_inputs() {
        let two = vec![Vec3::zeros(), Vec3::x()];
        assert!(matches!(
            ransac_fit_plane(&two, 0.05, 10, 0),
            Err(CurbError::DegenerateInput(_))
        ));
        let line: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(
            ransac_fit_plane(&line, 0.05, 10, 0),
            Err(CurbError::DegenerateInput(_))
        ));
    }

    #[test]
    fn unstructured_cloud_rejected() {
        let c = PointCloud::new(vec![Vec3::new(1.0, 0.0, 0.0)]);
        assert!(matches!(
            detect_curbs(&c, &CurbParams::default()),
            Err(CurbError::Unstructured)
        ));
    }

    #[test]
    fn dilation_box() {
        let mut m = vec![false; 5 * 8];
        m[2 * 8 + 4] = true;
        let d = dilate(&m, 5, 8, 3, 3);
        let set: Vec<usize> = (0..40).filter(|&k| d[k]).collect();
        assert_eq!(set, vec![11, 12, 13, 19, 20, 21, 27, 28, 29]);
    }

    #[test]
    fn structure_mismatch_rejected() {
        let c = PointCloud {
            points: vec![Vec3::new(1.0, 0.0, 0.0)],
            structure: Some(RingStructure {
                rings: 1,
                azimuth_bins: 4,
                ring: vec![3],
                azimuth: vec![0],
            }),
        };
        assert!(RangeImage::from_cloud(&c).is_err());
    }
}
