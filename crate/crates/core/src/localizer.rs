//! Tracking a robot through the topological map.
//!
//! Per step the localizer tries, in order: staying in the current location
//! on odometry, moving along an edge by scan matching, global localization
//! (retrieval + matching), and finally an unmatched move to the nearest
//! neighbor or dead reckoning while lost.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{grid_overlap, PointCloud, Pose2D};
use crate::grid::{process_scan, GridError, ScanRecord};
use crate::place_recognition::{retrieve_top_k, PlaceEncoder};
use crate::scan_matcher::{try_match, MatchResult, MatcherConfig};
use crate::topo_map::{MapError, TopoMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizeError {
    #[error("localizer state is not initialized")]
    UninitializedState,
    #[error("map is empty")]
    EmptyMap,
    #[error("global localization of the first scan failed")]
    GlobalInitFailed,
    #[error("{frames} frames but {odometry} odometry increments")]
    LengthMismatch { frames: usize, odometry: usize },
    #[error("invalid localizer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scan(#[from] GridError),
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizerConfig {
    /// Minimum grid overlap to stay in the current location.
    pub overlap_min: f64,
    /// Largest accepted distance between an edge-match result and its guess, meters.
    pub jump_threshold: f64,
    /// The robot is "inside" a location while its offset is below this, meters.
    pub inside_radius: f64,
    /// Branch 4 moves to a neighbor only if the guessed offset is below this, meters.
    pub fallback_radius: f64,
    /// Retrieval candidates for global localization.
    pub top_k: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            overlap_min: 0.4,
            jump_threshold: 3.0,
            inside_radius: 5.0,
            fallback_radius: 5.0,
            top_k: 5,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<(), LocalizeError> {
        let ok = self.overlap_min > 0.0
            && self.overlap_min < 1.0
            && self.jump_threshold > 0.0
            && self.inside_radius > 0.0
            && self.fallback_radius > 0.0
            && self.top_k > 0;
        if !ok {
            return Err(LocalizeError::InvalidConfig(
                "overlap_min must be in (0,1); radii, jump threshold and top_k positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizerState {
    pub v_cur: usize,
    /// Robot pose in `v_cur`'s frame.
    pub t_cur: Pose2D,
    pub lost: bool,
    pub t: usize,
}

/// Which branch decided a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    /// Still inside `v_cur` with enough overlap; odometry applied.
    Stay,
    /// Matched to a neighbor along an edge.
    Edge,
    /// Matched to a retrieved location.
    Global,
    /// Moved to the nearest neighbor without matching.
    Unmatched,
    /// Nothing worked; dead reckoning in `v_cur`.
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub t: usize,
    pub branch: Branch,
    pub v_cur: usize,
    pub t_cur: Pose2D,
    pub global_pose: Pose2D,
    pub lost: bool,
    /// Distance between an accepted edge match and its initial guess.
    pub jump: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BranchStats {
    pub stay: usize,
    pub edge: usize,
    pub global: usize,
    pub unmatched: usize,
    pub lost: usize,
    /// Edge accepts whose jump exceeded the threshold. Always zero.
    pub jump_violations: usize,
}

impl BranchStats {
    fn record(&mut self, b: Branch) {
        match b {
            Branch::Stay => self.stay += 1,
            Branch::Edge => self.edge += 1,
            Branch::Global => self.global += 1,
            Branch::Unmatched => self.unmatched += 1,
            Branch::Lost => self.lost += 1,
        }
    }
}

/// Successful global localization: location and robot pose in its frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMatch {
    pub location: usize,
    pub t_loc: Pose2D,
    pub result: MatchResult,
}

/// Retrieval of the top-k locations, then scan matching (no initial guess)
/// against each in parallel. Returns the successful match with the highest
/// overlap.
pub fn global_localize(
    rec: &ScanRecord,
    frame: Option<usize>,
    map: &TopoMap,
    encoder: &dyn PlaceEncoder,
    cfg: &LocalizerConfig,
    matcher: &MatcherConfig,
) -> Option<GlobalMatch> {
    let q = match encoder.encode(rec, frame) {
        Ok(q) => q,
        Err(e) => {
            log::debug!("global localization skipped: {e}");
            return None;
        }
    };
    let fp = &map.pipeline.features;
    retrieve_top_k(&q, map, cfg.top_k)
        .par_iter()
        .map(|&(v, _)| {
            let result = try_match(rec, &map.locations[v].rec, None, matcher, fp);
            GlobalMatch {
                location: v,
                t_loc: result.x,
                result,
            }
        })
        .filter(|g| g.result.success && g.result.iou >= cfg.overlap_min)
        .max_by(|a, b| a.result.iou.total_cmp(&b.result.iou).then(b.location.cmp(&a.location)))
}

pub struct Localizer<'a> {
    map: &'a TopoMap,
    encoder: &'a dyn PlaceEncoder,
    cfg: LocalizerConfig,
    matcher: MatcherConfig,
    state: Option<LocalizerState>,
    stats: BranchStats,
}

impl<'a> Localizer<'a> {
    pub fn new(
        map: &'a TopoMap,
        encoder: &'a dyn PlaceEncoder,
        cfg: LocalizerConfig,
        matcher: MatcherConfig,
    ) -> Result<Self, LocalizeError> {
        cfg.validate()?;
        matcher
            .validate()
            .map_err(|e| LocalizeError::InvalidConfig(e.to_string()))?;
        if map.is_empty() {
            return Err(LocalizeError::EmptyMap);
        }
        Ok(Self {
            map,
            encoder,
            cfg,
            matcher,
            state: None,
            stats: BranchStats::default(),
        })
    }

    /// Starts from a known global pose: nearest location, relative offset.
    pub fn init_at_pose(&mut self, p0: &Pose2D) {
        let v = self.map.nearest(p0).expect("map is non-empty");
        self.state = Some(LocalizerState {
            v_cur: v,
            t_cur: self.map.locations[v].pose.between(p0),
            lost: false,
            t: 0,
        });
    }

    /// Starts from global localization of one scan; false if it failed.
    pub fn init_global(&mut self, rec: &ScanRecord, frame: Option<usize>) -> bool {
        match global_localize(rec, frame, self.map, self.encoder, &self.cfg, &self.matcher) {
            Some(g) => {
                self.state = Some(LocalizerState {
                    v_cur: g.location,
                    t_cur: g.t_loc,
                    lost: false,
                    t: 0,
                });
                true
            }
            None => false,
        }
    }

    pub fn state(&self) -> Option<&LocalizerState> {
        self.state.as_ref()
    }

    pub fn stats(&self) -> &BranchStats {
        &self.stats
    }

    pub fn global_pose(&self) -> Result<Pose2D, LocalizeError> {
        let s = self.state.as_ref().ok_or(LocalizeError::UninitializedState)?;
        Ok(self.map.locations[s.v_cur].pose.compose(&s.t_cur))
    }

    /// Processes a raw scan with the map's pipeline settings, then steps.
    pub fn step(
        &mut self,
        cloud: &PointCloud,
        odom: &Pose2D,
        frame: Option<usize>,
    ) -> Result<StepReport, LocalizeError> {
        if self.state.is_none() {
            return Err(LocalizeError::UninitializedState);
        }
        let rec = if cloud.is_empty() {
            ScanRecord::empty(&self.map.pipeline.grid)
        } else {
            process_scan(cloud, &self.map.pipeline)?
        };
        self.step_record(&rec, odom, frame)
    }

    /// One state-machine step on an already processed scan.
    pub fn step_record(
        &mut self,
        rec: &ScanRecord,
        odom: &Pose2D,
        frame: Option<usize>,
    ) -> Result<StepReport, LocalizeError> {
        let s = self.state.ok_or(LocalizeError::UninitializedState)?;
        let cur = &self.map.locations[s.v_cur];
        let t_pred = s.t_cur.compose(odom);

        let (branch, v, t, lost, jump) = 'decide: {
            // 1: still inside v_cur with enough overlap
            if t_pred.translation_norm() < self.cfg.inside_radius {
                let overlap =
                    grid_overlap(&rec.grid, &cur.rec.grid, &t_pred, self.matcher.iou_tolerance_cells).unwrap_or(0.0);
                if overlap >= self.cfg.overlap_min {
                    break 'decide (Branch::Stay, s.v_cur, t_pred, s.lost, None);
                }
            }

            // guesses for every neighbor: p_next^-1 * p_cur * T'
            let neighbors: Vec<(usize, Pose2D)> = self
                .map
                .neighbors(s.v_cur)?
                .into_iter()
                .map(|(n, rel)| (n, rel.inverse().compose(&t_pred)))
                .collect();

            // 2: move along an edge
            let fp = &self.map.pipeline.features;
            let edge = neighbors
                .par_iter()
                .filter_map(|(n, guess)| {
                    let m = try_match(rec, &self.map.locations[*n].rec, Some(guess), &self.matcher, fp);
                    let jump = (m.x.translation() - guess.translation()).norm();
                    (m.success && jump <= self.cfg.jump_threshold).then_some((*n, m, jump))
                })
                .max_by(|a, b| a.1.iou.total_cmp(&b.1.iou).then(b.0.cmp(&a.0)));
            if let Some((n, m, jump)) = edge {
                break 'decide (Branch::Edge, n, m.x, false, Some(jump));
            }

            // 3: global localization
            if let Some(g) = global_localize(rec, frame, self.map, self.encoder, &self.cfg, &self.matcher) {
                break 'decide (Branch::Global, g.location, g.t_loc, false, None);
            }

            // 4: nearest neighbor without matching, or lost
            let nearest = neighbors.iter().min_by(|a, b| {
                a.1.translation_norm()
                    .total_cmp(&b.1.translation_norm())
                    .then(a.0.cmp(&b.0))
            });
            match nearest {
                Some(&(n, guess)) if guess.translation_norm() < self.cfg.fallback_radius => {
                    (Branch::Unmatched, n, guess, s.lost, None)
                }
                _ => (Branch::Lost, s.v_cur, t_pred, true, None),
            }
        };

        if let Some(j) = jump {
            debug_assert!(j <= self.cfg.jump_threshold);
            if j > self.cfg.jump_threshold {
                self.stats.jump_violations += 1;
            }
        }
        self.stats.record(branch);
        let next = LocalizerState {
            v_cur: v,
            t_cur: t,
            lost,
            t: s.t + 1,
        };
        self.state = Some(next);
        Ok(StepReport {
            t: next.t,
            branch,
            v_cur: v,
            t_cur: t,
            global_pose: self.map.locations[v].pose.compose(&t),
            lost,
            jump,
        })
    }
}

/// How [`localize_run`] obtains the initial state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    Pose(Pose2D),
    /// Global localization of the first frame.
    Global,
}

/// Runs the localizer over a whole sequence. `odometry[t]` is the increment
/// from frame `t-1` to `t` (`odometry[0]` is ignored); frame indices are
/// passed on to the encoder.
pub fn localize_run(
    loc: &mut Localizer,
    frames: &[PointCloud],
    odometry: &[Pose2D],
    init: InitMode,
) -> Result<Vec<StepReport>, LocalizeError> {
    if frames.len() != odometry.len() {
        return Err(LocalizeError::LengthMismatch {
            frames: frames.len(),
            odometry: odometry.len(),
        });
    }
    let mut out = Vec::with_capacity(frames.len());
    for (t, cloud) in frames.iter().enumerate() {
        let odom = if t == 0 {
            match init {
                InitMode::Pose(p) => loc.init_at_pose(&p),
                InitMode::Global => {
                    let rec = process_scan(cloud, &loc.map.pipeline)?;
                    if !loc.init_global(&rec, Some(0)) {
                        return Err(LocalizeError::GlobalInitFailed);
                    }
                }
            }
            Pose2D::identity()
        } else {
            odometry[t]
        };
        let mut r = loc.step(cloud, &odom, Some(t))?;
        r.t = t;
        out.push(r);
    }
    Ok(out)
}
