//! Trajectory error metrics: per-step ATE, its mean and median, and the
//! localization success rate at a distance threshold.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose2D;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("estimated has {estimated} poses, ground truth {ground_truth}")]
    LengthMismatch { estimated: usize, ground_truth: usize },
    #[error("no samples")]
    Empty,
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("timestamps not strictly increasing at index {0}")]
    NonMonotonicTimestamps(usize),
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

/// Time-aligned estimated and ground-truth poses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub timestamps: Vec<f64>,
    pub estimated: Vec<Pose2D>,
    pub ground_truth: Vec<Pose2D>,
}

impl TrajectoryPair {
    pub fn new(timestamps: Vec<f64>, estimated: Vec<Pose2D>, ground_truth: Vec<Pose2D>) -> Result<Self, EvalError> {
        if estimated.len() != ground_truth.len() || timestamps.len() != ground_truth.len() {
            return Err(EvalError::LengthMismatch {
                estimated: estimated.len(),
                ground_truth: ground_truth.len(),
            });
        }
        if let Some(k) = (1..timestamps.len()).find(|&k| !(timestamps[k] > timestamps[k - 1])) {
            return Err(EvalError::NonMonotonicTimestamps(k));
        }
        Ok(Self {
            timestamps,
            estimated,
            ground_truth,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// `e_t = |p̂_t - p_t|` on translation only.
pub fn ate_errors(tp: &TrajectoryPair) -> Result<Vec<f64>, EvalError> {
    if tp.estimated.len() != tp.ground_truth.len() {
        return Err(EvalError::LengthMismatch {
            estimated: tp.estimated.len(),
            ground_truth: tp.ground_truth.len(),
        });
    }
    if tp.estimated.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(tp
        .estimated
        .iter()
        .zip(&tp.ground_truth)
        .map(|(e, g)| (e.translation() - g.translation()).norm())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteStats {
    pub mean: f64,
    pub median: f64,
}

/// Mean and median; the median of an even count averages the two middle values.
pub fn ate_stats(errors: &[f64]) -> Result<AteStats, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::Empty);
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let mut s = errors.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    Ok(AteStats { mean, median })
}

/// Fraction of steps with error strictly below `threshold`.
pub fn sr_loc(errors: &[f64], threshold: f64) -> Result<f64, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::Empty);
    }
    if !(threshold > 0.0) {
        return Err(EvalError::InvalidThreshold(threshold));
    }
    Ok(errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64)
}

/// Timestamped pose sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stamped {
    pub t: f64,
    pub pose: Pose2D,
}

/// Pairs every estimated sample with the nearest ground-truth sample within
/// `max_gap` seconds; estimates without a partner are dropped. Both inputs
/// must be sorted by time.
pub fn associate(estimated: &[Stamped], ground_truth: &[Stamped], max_gap: f64) -> Result<TrajectoryPair, EvalError> {
    for seq in [estimated, ground_truth] {
        if let Some(k) = (1..seq.len()).find(|&k| !(seq[k].t > seq[k - 1].t)) {
            return Err(EvalError::NonMonotonicTimestamps(k));
        }
    }
    let (mut ts, mut est, mut gt) = (Vec::new(), Vec::new(), Vec::new());
    let mut j = 0;
    for e in estimated {
        while j + 1 < ground_truth.len() && (ground_truth[j + 1].t - e.t).abs() <= (ground_truth[j].t - e.t).abs() {
            j += 1;
        }
        if let Some(g) = ground_truth.get(j) {
            if (g.t - e.t).abs() <= max_gap {
                ts.push(e.t);
                est.push(e.pose);
                gt.push(g.pose);
            }
        }
    }
    if ts.is_empty() {
        return Err(EvalError::Empty);
    }
    TrajectoryPair::new(ts, est, gt)
}

/// Everything `evaluate` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub steps: usize,
    pub mean_ate: f64,
    pub median_ate: f64,
    pub sr_loc: f64,
    pub threshold: f64,
}

pub fn evaluate(tp: &TrajectoryPair, threshold: f64) -> Result<(Metrics, Vec<f64>), EvalError> {
    let errors = ate_errors(tp)?;
    let stats = ate_stats(&errors)?;
    let metrics = Metrics {
        steps: errors.len(),
        mean_ate: stats.mean,
        median_ate: stats.median,
        sr_loc: sr_loc(&errors, threshold)?,
        threshold,
    };
    Ok((metrics, errors))
}

impl Metrics {
    /// Aligned text table.
    pub fn table(&self, name: &str) -> String {
        format!(
            "{:<16} {:>12} {:>14} {:>10} {:>7}\n{:<16} {:>12.3} {:>14.3} {:>10.3} {:>7}\n",
            "method",
            "mean ATE, m",
            "median ATE, m",
            "SR_loc",
            "steps",
            name,
            self.mean_ate,
            self.median_ate,
            self.sr_loc,
            self.steps
        )
    }

    pub fn csv(&self, name: &str) -> String {
        format!(
            "method,mean_ate,median_ate,sr_loc,threshold,steps\n{name},{},{},{},{},{}\n",
            self.mean_ate, self.median_ate, self.sr_loc, self.threshold, self.steps
        )
    }
}

/// Reads `t,x,y,theta` columns (by header name; other columns are ignored).
pub fn read_pose_csv(path: &Path) -> Result<Vec<Stamped>, EvalError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| EvalError::Parse(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| EvalError::Parse(format!("{}: missing column {name}", path.display())))
    };
    let (ct, cx, cy, ch) = (col("t")?, col("x")?, col("y")?, col("theta")?);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| EvalError::Parse(e.to_string()))?;
        let num = |c: usize| -> Result<f64, EvalError> {
            rec.get(c)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| EvalError::Parse(format!("{}: bad number on row {}", path.display(), line + 1)))
        };
        out.push(Stamped {
            t: num(ct)?,
            pose: Pose2D::new(num(cx)?, num(cy)?, num(ch)?),
        });
    }
    Ok(out)
}

/// Per-step errors for box plots: `t,error`.
pub fn write_errors_csv(path: &Path, tp: &TrajectoryPair, errors: &[f64]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| EvalError::Io(e.to_string());
    w.write_record(["t", "error"]).map_err(io)?;
    for (t, e) in tp.timestamps.iter().zip(errors) {
        w.write_record([t.to_string(), e.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| EvalError::Io(e.to_string()))
}
