//! One TOML document holding every tunable, section per module. Missing
//! sections and keys take their defaults; unknown keys are rejected.
//!
//! ```toml
//! [simulate]
//! seed = 1
//! lateral_offset = 1.0
//!
//! [matcher]
//! funnel = [15.0, 7.0, 1.0, 0.1]
//! iou_min = 0.4
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curb::CurbParams;
use crate::features::FeatureParams;
use crate::grid::{GridConfig, ScanPipelineConfig};
use crate::localizer::LocalizerConfig;
use crate::place_recognition::{PolarEncoderConfig, PolarSpectrumEncoder};
use crate::scan_matcher::MatcherConfig;
use crate::sim::{LidarModel, OdometryNoise, WorldParams};
use crate::topo_map::MapConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(String),
    #[error("config parse: {0}")]
    Parse(String),
    #[error("invalid config [{section}]: {message}")]
    Invalid { section: &'static str, message: String },
}

/// Trajectory and run generation for `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Seed for scan noise and odometry noise.
    pub seed: u64,
    pub world_seed: u64,
    /// Distance between consecutive frames, m.
    pub step: f64,
    /// Time between consecutive frames, s.
    pub dt: f64,
    /// Block range `[first, last]` enclosed by the built-in loop.
    pub loop_blocks_x: [usize; 2],
    pub loop_blocks_y: [usize; 2],
    /// Sideways shift of the whole trajectory (left positive), m.
    pub lateral_offset: f64,
    /// Simulate odometry noise; mapping runs use `false`.
    pub noisy_odometry: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world_seed: 7,
            step: 1.0,
            dt: 0.1,
            loop_blocks_x: [1, 3],
            loop_blocks_y: [1, 3],
            lateral_offset: 0.0,
            noisy_odometry: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Success threshold for SR_loc, m.
    pub threshold: f64,
    /// Largest timestamp gap when associating estimates with ground truth, s.
    pub max_gap: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            threshold: 10.0,
            max_gap: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub simulate: SimulateConfig,
    pub world: WorldParams,
    pub lidar: LidarModel,
    pub noise: OdometryNoise,
    pub grid: GridConfig,
    pub curb: CurbParams,
    pub features: FeatureParams,
    pub matcher: MatcherConfig,
    pub map: MapConfig,
    pub localizer: LocalizerConfig,
    pub encoder: PolarEncoderConfig,
    pub evaluation: EvaluationConfig,
}

fn invalid(section: &'static str) -> impl FnOnce(String) -> ConfigError {
    move |message| ConfigError::Invalid { section, message }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    /// `path` if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn pipeline(&self) -> ScanPipelineConfig {
        ScanPipelineConfig {
            grid: self.grid.clone(),
            curb: self.curb.clone(),
            features: self.features.clone(),
        }
    }

    pub fn encoder(&self) -> Result<PolarSpectrumEncoder, ConfigError> {
        PolarSpectrumEncoder::new(self.encoder.clone()).map_err(|e| invalid("encoder")(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.simulate;
        if !(s.step > 0.0 && s.dt > 0.0 && s.lateral_offset.is_finite()) {
            return Err(invalid("simulate")("step and dt must be positive".into()));
        }
        let blocks_ok = |r: [usize; 2], n: usize| r[0] < r[1] && r[1] <= n;
        if !blocks_ok(s.loop_blocks_x, self.world.blocks_x) || !blocks_ok(s.loop_blocks_y, self.world.blocks_y) {
            return Err(invalid("simulate")(
                "loop blocks must satisfy first < last <= world block count".into(),
            ));
        }
        self.world.validate().map_err(|e| invalid("world")(e.to_string()))?;
        self.lidar.validate().map_err(|e| invalid("lidar")(e.to_string()))?;
        let n = &self.noise;
        if [n.scale_sigma, n.trans_sigma, n.rot_sigma].iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid("noise")("sigmas must be non-negative".into()));
        }
        self.grid.validate().map_err(|e| invalid("grid")(e.to_string()))?;
        self.curb.validate().map_err(|e| invalid("curb")(e.to_string()))?;
        let f = &self.features;
        if f.max_n == 0 || f.patch_radius == 0 || !(f.ratio_max > 0.0 && f.ratio_max <= 1.0) || f.min_inliers < 2 {
            return Err(invalid("features")(
                "max_n and patch_radius must be positive, ratio_max in (0,1], min_inliers >= 2".into(),
            ));
        }
        self.matcher.validate().map_err(|e| invalid("matcher")(e.to_string()))?;
        self.map.validate().map_err(|e| invalid("map")(e.to_string()))?;
        self.localizer
            .validate()
            .map_err(|e| invalid("localizer")(e.to_string()))?;
        self.encoder()?;
        let e = &self.evaluation;
        if !(e.threshold > 0.0 && e.max_gap >= 0.0) {
            return Err(invalid("evaluation")(
                "threshold must be positive, max_gap non-negative".into(),
            ));
        }
        Ok(())
    }
}
