//! Weighted Gauss-Newton scan matching on SE(2).
//!
//! The objective combines three factor families evaluated at a transform `X`
//! mapping reference-scan points into the candidate frame:
//!
//! * feature pairs, `Ω_f ‖X(r) − c‖²`
//! * wall points against the candidate wall distance map, `Ω_w D_w(X(p))²`
//! * curb points against the candidate curb distance map, `Ω_c D_c(X(p))²`
//!
//! [`match_scans`] seeds `X` from features (or a caller guess), tightens the
//! feature-pair outlier threshold over a coarse-to-fine funnel and finally
//! falls back to walls alone when the overlap check fails.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    estimate_initial_transform, match_features, steer_features, FeatureError, FeatureKind, FeatureParams,
};
use crate::geometry::{grid_overlap, normalize_angle, DistanceMap, Pose2D, Vec2};
use crate::grid::ScanRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("normal equations are rank deficient")]
    SingularHessian,
    #[error("no initial guess: {0}")]
    NoInitialGuess(FeatureError),
    #[error("candidate scan has no distance maps")]
    MissingDistanceMaps,
    #[error("invalid matcher configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorWeights {
    pub omega_f: f64,
    pub omega_w: f64,
    pub omega_c: f64,
}

impl Default for FactorWeights {
    fn default() -> Self {
        Self {
            omega_f: 8.0,
            omega_w: 0.5,
            omega_c: 0.25,
        }
    }
}

impl FactorWeights {
    pub fn walls_only(&self) -> Self {
        Self {
            omega_f: 0.0,
            omega_w: if self.omega_w > 0.0 { self.omega_w } else { 1.0 },
            omega_c: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        let ws = [self.omega_f, self.omega_w, self.omega_c];
        if ws.iter().any(|w| !(*w >= 0.0)) || ws.iter().all(|w| *w == 0.0) {
            return Err(MatchError::InvalidConfig(
                "weights must be >= 0 with at least one positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    pub weights: FactorWeights,
    /// Feature-pair outlier thresholds, in grid cells, applied coarse to fine.
    pub funnel: Vec<f64>,
    pub iters_per_stage: usize,
    pub fallback_iters: usize,
    pub iou_min: f64,
    /// Cell tolerance of the overlap gate (0 = exact cell IOU).
    pub iou_tolerance_cells: usize,
    pub min_inliers: usize,
    /// Feature pair inlier tolerance, grid cells.
    pub inlier_tol_cells: f64,
    pub lambda_init: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            weights: FactorWeights::default(),
            funnel: vec![15.0, 7.0, 1.0, 0.1],
            iters_per_stage: 10,
            fallback_iters: 20,
            iou_min: 0.4,
            iou_tolerance_cells: 1,
            min_inliers: 5,
            inlier_tol_cells: 3.0,
            lambda_init: 1e-6,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        self.weights.validate()?;
        if self.funnel.is_empty() || self.funnel.iter().any(|d| !(*d > 0.0)) {
            return Err(MatchError::InvalidConfig("funnel thresholds must be positive".into()));
        }
        if !(self.iou_min > 0.0 && self.iou_min < 1.0) || !(self.lambda_init > 0.0) {
            return Err(MatchError::InvalidConfig(
                "iou_min must lie in (0,1), lambda_init > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Factor inputs for one optimization. Points are in meters, in the reference
/// scan frame (`pairs.0`, walls, curbs) or candidate frame (`pairs.1`, maps).
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub pairs: Vec<(Vec2, Vec2)>,
    pub wall_points: &'a [Vec2],
    pub curb_points: &'a [Vec2],
    pub wall_dmap: Option<&'a DistanceMap>,
    pub curb_dmap: Option<&'a DistanceMap>,
    pub weights: FactorWeights,
}

/// d X(p) / d (x, y, θ)
#[inline]
fn point_jacobian(x: &Pose2D, p: &Vec2) -> [[f64; 3]; 2] {
    let (s, c) = x.theta.sin_cos();
    [[1.0, 0.0, -s * p.x - c * p.y], [0.0, 1.0, c * p.x - s * p.y]]
}

impl<'a> Problem<'a> {
    pub fn from_records(reference: &'a ScanRecord, candidate: &'a ScanRecord, weights: FactorWeights) -> Self {
        Self {
            pairs: Vec::new(),
            wall_points: &reference.wall_points,
            curb_points: &reference.curb_points,
            wall_dmap: candidate.wall_dmap.as_ref().filter(|m| !m.no_source),
            curb_dmap: candidate.curb_dmap.as_ref().filter(|m| !m.no_source),
            weights,
        }
    }

    /// Visits every scalar residual with its weight and 1×3 Jacobian.
    fn for_each_residual(&self, x: &Pose2D, mut f: impl FnMut(f64, f64, [f64; 3])) {
        let w = &self.weights;
        if w.omega_f > 0.0 {
            for (r, c) in &self.pairs {
                let e = x.apply(r) - c;
                let j = point_jacobian(x, r);
                f(w.omega_f, e.x, j[0]);
                f(w.omega_f, e.y, j[1]);
            }
        }
        for (omega, pts, map) in [
            (w.omega_w, self.wall_points, self.wall_dmap),
            (w.omega_c, self.curb_points, self.curb_dmap),
        ] {
            let Some(map) = map else { continue };
            if omega <= 0.0 {
                continue;
            }
            for p in pts {
                let q = x.apply(p);
                let Some((d, g)) = map.sample(&q) else { continue };
                let jp = point_jacobian(x, p);
                let j = [
                    g.x * jp[0][0] + g.y * jp[1][0],
                    g.x * jp[0][1] + g.y * jp[1][1],
                    g.x * jp[0][2] + g.y * jp[1][2],
                ];
                f(omega, d, j);
            }
        }
    }

    pub fn cost(&self, x: &Pose2D) -> f64 {
        let mut cost = 0.0;
        self.for_each_residual(x, |w, r, _| cost += w * r * r);
        cost
    }

    /// Analytic gradient of [`Problem::cost`] with respect to `(x, y, θ)`.
    pub fn gradient(&self, x: &Pose2D) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        self.for_each_residual(x, |w, r, j| g += 2.0 * w * r * Vector3::from(j));
        g
    }

    /// Gauss-Newton normal equations `(JᵀΩJ, JᵀΩr)` and the cost.
    pub fn normal_equations(&self, x: &Pose2D) -> (Matrix3<f64>, Vector3<f64>, f64) {
        let mut h = Matrix3::zeros();
        let mut b = Vector3::zeros();
        let mut cost = 0.0;
        self.for_each_residual(x, |w, r, j| {
            let j = Vector3::from(j);
            h += w * j * j.transpose();
            b += w * r * j;
            cost += w * r * r;
        });
        (h, b, cost)
    }
}

/// One damped Gauss-Newton iteration. The damping factor is raised tenfold
/// after each rejected (cost-increasing) trial and lowered tenfold after an
/// accepted one, so the returned cost never exceeds the cost at `x`. When no
/// trial improves the cost, `x` is returned unchanged.
pub fn gauss_newton_step(x: &Pose2D, problem: &Problem, lambda: &mut f64) -> Result<(Pose2D, f64), MatchError> {
    let (h, b, cost0) = problem.normal_equations(x);
    if cost0 == 0.0 || b.iter().all(|v| *v == 0.0) {
        return Ok((*x, cost0));
    }
    if !h.iter().all(|v| v.is_finite()) || !b.iter().all(|v| v.is_finite()) {
        return Err(MatchError::SingularHessian);
    }
    let mut factorized = false;
    for _ in 0..12 {
        let damped = h + Matrix3::identity() * *lambda;
        if let Some(chol) = damped.cholesky() {
            factorized = true;
            let delta = chol.solve(&(-b));
            let cand = Pose2D::new(x.x + delta.x, x.y + delta.y, normalize_angle(x.theta + delta.z));
            let cost = problem.cost(&cand);
            if cost <= cost0 {
                *lambda = (*lambda / 10.0).max(1e-12);
                return Ok((cand, cost));
            }
        }
        *lambda *= 10.0;
    }
    if !factorized {
        return Err(MatchError::SingularHessian);
    }
    Ok((*x, cost0))
}

/// Runs `iters` damped iterations; returns the final pose and cost.
pub fn optimize(x0: &Pose2D, problem: &Problem, iters: usize, lambda_init: f64) -> Result<(Pose2D, f64), MatchError> {
    let mut lambda = lambda_init;
    let mut x = *x0;
    let mut cost = problem.cost(&x);
    for _ in 0..iters {
        let (nx, nc) = gauss_newton_step(&x, problem, &mut lambda)?;
        let converged = nx == x;
        x = nx;
        cost = nc;
        if converged {
            break;
        }
    }
    Ok((x, cost))
}

fn pair_residual(x: &Pose2D, pair: &(Vec2, Vec2)) -> f64 {
    (x.apply(&pair.0) - pair.1).norm()
}

/// Result of the funnel stage: optimized pose and, per threshold, the indices
/// (into the original pair list) that survived it.
#[derive(Debug, Clone, PartialEq)]
pub struct FunnelTrace {
    pub x: Pose2D,
    pub cost: f64,
    pub kept: Vec<Vec<usize>>,
}

/// Coarse-to-fine optimization. Pairs farther than the first threshold from
/// the seed are dropped before optimizing; after each stage pairs whose
/// residual exceeds that stage's threshold are removed.
pub fn run_funnel(
    x0: &Pose2D,
    problem: &Problem,
    cfg: &MatcherConfig,
    resolution: f64,
) -> Result<FunnelTrace, MatchError> {
    let all = problem.pairs.clone();
    let first = cfg.funnel[0] * resolution;
    let mut idx: Vec<usize> = (0..all.len())
        .filter(|&k| pair_residual(x0, &all[k]) <= first)
        .collect();
    let mut x = *x0;
    let mut cost = 0.0;
    let mut kept = Vec::with_capacity(cfg.funnel.len());
    let mut stage_problem = problem.clone();
    for &delta in &cfg.funnel {
        stage_problem.pairs = idx.iter().map(|&k| all[k]).collect();
        (x, cost) = optimize(&x, &stage_problem, cfg.iters_per_stage, cfg.lambda_init)?;
        let tol = delta * resolution;
        idx.retain(|&k| pair_residual(&x, &all[k]) <= tol);
        kept.push(idx.clone());
    }
    Ok(FunnelTrace { x, cost, kept })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    /// Transform taking reference-scan points into the candidate frame.
    pub x: Pose2D,
    pub success: bool,
    pub iou: f64,
    /// Feature pairs within the inlier tolerance at `x`.
    pub inliers: usize,
    pub final_cost: f64,
    pub fallback: bool,
    pub pairs: usize,
}

impl MatchResult {
    fn failed() -> Self {
        Self {
            x: Pose2D::identity(),
            success: false,
            iou: 0.0,
            inliers: 0,
            final_cost: f64::INFINITY,
            fallback: false,
            pairs: 0,
        }
    }
}

/// Matched feature positions in meters. Without a guess the rotation-invariant
/// kind is used; with one, axis-aligned corner descriptors of the reference are
/// re-sampled along the guessed rotation.
pub fn feature_pairs(
    reference: &ScanRecord,
    candidate: &ScanRecord,
    guess: Option<&Pose2D>,
    fp: &FeatureParams,
) -> Vec<(Vec2, Vec2)> {
    let (ref_feats, cand_feats) = match guess {
        None => (
            reference.features.oriented.clone(),
            candidate.features.get(FeatureKind::OrientedBinary),
        ),
        Some(g) => (
            steer_features(&reference.grid, &reference.features.corners, -g.theta, fp),
            candidate.features.get(FeatureKind::CornerScore),
        ),
    };
    match_features(&ref_feats, cand_feats, fp)
        .into_iter()
        .map(|m| {
            (
                reference.grid.grid_to_scan(&ref_feats[m.ref_idx].pos()),
                candidate.grid.grid_to_scan(&cand_feats[m.cand_idx].pos()),
            )
        })
        .collect()
}

/// Full matching of `reference` against `candidate`.
pub fn match_scans(
    reference: &ScanRecord,
    candidate: &ScanRecord,
    guess: Option<&Pose2D>,
    cfg: &MatcherConfig,
    fp: &FeatureParams,
) -> Result<MatchResult, MatchError> {
    if !candidate.has_distance_maps() {
        return Err(MatchError::MissingDistanceMaps);
    }
    let res = candidate.grid.resolution;
    let pairs = feature_pairs(reference, candidate, guess, fp);
    let x0 = match guess {
        Some(g) => *g,
        None => {
            estimate_initial_transform(
                &pairs,
                cfg.inlier_tol_cells * res,
                cfg.min_inliers,
                fp.ransac_iters,
                fp.seed,
            )
            .map_err(MatchError::NoInitialGuess)?
            .pose
        }
    };
    let mut problem = Problem::from_records(reference, candidate, cfg.weights);
    problem.pairs = pairs;
    let trace = run_funnel(&x0, &problem, cfg, res)?;
    let mut x = trace.x;
    let mut cost = trace.cost;
    let iou_of = |x: &Pose2D| grid_overlap(&reference.grid, &candidate.grid, x, cfg.iou_tolerance_cells).unwrap_or(0.0);
    let mut iou = iou_of(&x);
    let mut fallback = false;
    if iou < cfg.iou_min {
        fallback = true;
        let mut walls = Problem::from_records(reference, candidate, cfg.weights.walls_only());
        walls.pairs.clear();
        (x, cost) = optimize(&x, &walls, cfg.fallback_iters, cfg.lambda_init)?;
        iou = iou_of(&x);
    }
    let tol = cfg.inlier_tol_cells * res;
    let inliers = problem.pairs.iter().filter(|p| pair_residual(&x, p) <= tol).count();
    Ok(MatchResult {
        x,
        success: iou >= cfg.iou_min && inliers >= cfg.min_inliers,
        iou,
        inliers,
        final_cost: cost,
        fallback,
        pairs: problem.pairs.len(),
    })
}

/// [`match_scans`] with errors folded into an unsuccessful result.
pub fn try_match(
    reference: &ScanRecord,
    candidate: &ScanRecord,
    guess: Option<&Pose2D>,
    cfg: &MatcherConfig,
    fp: &FeatureParams,
) -> MatchResult {
    match match_scans(reference, candidate, guess, cfg, fp) {
        Ok(r) => r,
        Err(e) => {
            log::debug!("match failed: {e}");
            MatchResult::failed()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::procrustes_2d;
    use crate::geometry::{distance_transform, CellClass, OccupancyGrid};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Vec2> {
        (0..n)
            .map(|_| Vec2::new(rng.random_range(-extent..extent), rng.random_range(-extent..extent)))
            .collect()
    }

    fn random_map(rng: &mut ChaCha8Rng, cls: CellClass) -> DistanceMap {
        let mut g = OccupancyGrid::centered(0.2, 16.0);
        for _ in 0..30 {
            let (i, j) = (rng.random_range(0..g.width), rng.random_range(0..g.height));
            g.set(i, j, cls);
        }
        distance_transform(&g, cls, 2.0).unwrap()
    }

    #[test]
    fn stationary_point_is_fixed() {
        let pts = [Vec2::new(1.0, 2.0), Vec2::new(-3.0, 0.5)];
        let p = Problem {
            pairs: pts.iter().map(|p| (*p, *p)).collect(),
            wall_points: &[],
            curb_points: &[],
            wall_dmap: None,
            curb_dmap: None,
            weights: FactorWeights::default(),
        };
        let mut lambda = 1e-6;
        let (x, c) = gauss_newton_step(&Pose2D::identity(), &p, &mut lambda).unwrap();
        assert_eq!(x, Pose2D::identity());
        assert_eq!(c, 0.0);
    }

    #[test]
    fn single_pair_translation_in_one_step() {
        let p = Problem {
            pairs: vec![(Vec2::zeros(), Vec2::new(0.5, 0.0))],
            wall_points: &[],
            curb_points: &[],
            wall_dmap: None,
            curb_dmap: None,
            weights: FactorWeights::default(),
        };
        let mut lambda = 1e-6;
        let (x, c) = gauss_newton_step(&Pose2D::identity(), &p, &mut lambda).unwrap();
        assert!((x.x - 0.5).abs() < 1e-5 && x.y.abs() < 1e-12 && x.theta == 0.0);
        assert!(c < 1e-10);
    }

    #[test]
    fn empty_problem_has_zero_cost() {
        let p = Problem {
            pairs: vec![],
            wall_points: &[],
            curb_points: &[],
            wall_dmap: None,
            curb_dmap: None,
            weights: FactorWeights::default(),
        };
        assert_eq!(p.cost(&Pose2D::new(1.0, 2.0, 0.3)), 0.0);
        let mut lambda = 1e-6;
        assert!(gauss_newton_step(&Pose2D::identity(), &p, &mut lambda).is_ok());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let wm = random_map(&mut rng, CellClass::Wall);
            let cm = random_map(&mut rng, CellClass::Curb);
            let walls = random_points(&mut rng, 60, 6.0);
            let curbs = random_points(&mut rng, 30, 6.0);
            let mut pairs = Vec::new();
            for p in random_points(&mut rng, 20, 6.0) {
                pairs.push((
                    p,
                    p + Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                ));
            }
            let p = Problem {
                pairs,
                wall_points: &walls,
                curb_points: &curbs,
                wall_dmap: Some(&wm),
                curb_dmap: Some(&cm),
                weights: FactorWeights::default(),
            };
            let x = Pose2D::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.3..0.3),
            );
            let g = p.gradient(&x);
            let h = 1e-7;
            let mut fd = Vector3::zeros();
            for k in 0..3 {
                let mut a = Vector3::new(x.x, x.y, x.theta);
                let mut b = a;
                a[k] += h;
                b[k] -= h;
                fd[k] = (p.cost(&Pose2D::new(a.x, a.y, a.z)) - p.cost(&Pose2D::new(b.x, b.y, b.z))) / (2.0 * h);
            }
            worst = worst.max((g - fd).norm() / fd.norm().max(1e-9));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn cost_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let wm = random_map(&mut rng, CellClass::Wall);
            let walls = random_points(&mut rng, 100, 6.0);
            let pairs: Vec<_> = random_points(&mut rng, 10, 6.0)
                .into_iter()
                .map(|p| (p, Pose2D::new(0.3, -0.2, 0.1).apply(&p)))
                .collect();
            let p = Problem {
                pairs,
                wall_points: &walls,
                curb_points: &[],
                wall_dmap: Some(&wm),
                curb_dmap: None,
                weights: FactorWeights::default(),
            };
            let mut x = Pose2D::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.2);
            let mut cost = p.cost(&x);
            let mut lambda = 1e-6;
            for _ in 0..30 {
                let (nx, nc) = gauss_newton_step(&x, &p, &mut lambda).unwrap();
                assert!(nc <= cost + 1e-9, "{nc} > {cost}");
                x = nx;
                cost = nc;
            }
        }
    }

    proptest! {
        #[test]
        fn features_only_equals_procrustes(
            tx in -3.0f64..3.0, ty in -3.0f64..3.0, th in -0.5f64..0.5, seed in 0u64..1000
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = Pose2D::new(tx, ty, th);
            let pairs: Vec<_> = random_points(&mut rng, 15, 20.0)
                .into_iter()
                .map(|p| (p, truth.apply(&p) + Vec2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05))))
                .collect();
            let p = Problem {
                pairs: pairs.clone(),
                wall_points: &[],
                curb_points: &[],
                wall_dmap: None,
                curb_dmap: None,
                weights: FactorWeights { omega_f: 1.0, omega_w: 0.0, omega_c: 0.0 },
            };
            let (x, _) = optimize(&Pose2D::identity(), &p, 50, 1e-6).unwrap();
            let closed = procrustes_2d(&pairs).unwrap();
            let (dt, dr) = x.error_to(&closed);
            prop_assert!(dt < 1e-6 && dr < 1e-6, "{dt} {dr}");
        }

        #[test]
        fn funnel_sets_are_nested(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = Pose2D::new(0.4, -0.3, 0.05);
            let pairs: Vec<_> = random_points(&mut rng, 40, 20.0)
                .into_iter()
                .enumerate()
                .map(|(k, p)| {
                    let noise = if k % 3 == 0 { 2.0 } else { 0.02 };
                    (p, truth.apply(&p) + Vec2::new(rng.random_range(-noise..noise), rng.random_range(-noise..noise)))
                })
                .collect();
            let p = Problem {
                pairs,
                wall_points: &[],
                curb_points: &[],
                wall_dmap: None,
                curb_dmap: None,
                weights: FactorWeights::default(),
            };
            let trace = run_funnel(&Pose2D::identity(), &p, &MatcherConfig::default(), 0.2).unwrap();
            for w in trace.kept.windows(2) {
                prop_assert!(w[1].iter().all(|k| w[0].contains(k)));
            }
        }
    }
}
