//! Bird's-eye projection of a leveled scan into a classified grid, plus the
//! wall and curb distance maps used as scan-matching targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curb::{detect_curbs, CurbError, CurbParams};
use crate::features::{detect_features, FeatureKind, FeatureParams, FeatureSet};
use crate::geometry::{distance_transform_flagged, CellClass, DistanceMap, OccupancyGrid, PointCloud, Vec2, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("invalid grid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Meters per cell.
    pub resolution: f64,
    /// Side length of the square grid centered on the sensor, meters.
    pub extent: f64,
    pub wall_zmin: f64,
    pub wall_zmax: f64,
    /// Minimum wall-band returns for a wall cell.
    pub min_hits: usize,
    /// Distance map truncation, meters.
    pub d_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolution: 0.2,
            extent: 80.0,
            wall_zmin: 0.3,
            wall_zmax: 2.5,
            min_hits: 2,
            d_max: 1.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.resolution > 0.0 && self.extent > self.resolution) {
            return Err(GridError::InvalidConfig(
                "resolution and extent must be positive".into(),
            ));
        }
        if !(self.wall_zmax > self.wall_zmin) || self.min_hits == 0 || !(self.d_max > 0.0) {
            return Err(GridError::InvalidConfig(
                "wall band, min_hits and d_max must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn empty_grid(&self) -> OccupancyGrid {
        OccupancyGrid::centered(self.resolution, self.extent)
    }
}

/// Everything the matcher and the map need from one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub grid: OccupancyGrid,
    /// Wall cell centers, scan frame.
    pub wall_points: Vec<Vec2>,
    /// Curb cell centers, scan frame.
    pub curb_points: Vec<Vec2>,
    pub wall_dmap: Option<DistanceMap>,
    pub curb_dmap: Option<DistanceMap>,
    pub features: FeatureSet,
}

impl ScanRecord {
    /// Record of a scan that saw nothing.
    pub fn empty(cfg: &GridConfig) -> Self {
        Self::from_grid(cfg.empty_grid())
    }

    /// Derives point lists from an already classified grid; distance maps and
    /// features are left empty.
    pub fn from_grid(grid: OccupancyGrid) -> Self {
        Self {
            wall_points: grid.class_points(CellClass::Wall),
            curb_points: grid.class_points(CellClass::Curb),
            grid,
            wall_dmap: None,
            curb_dmap: None,
            features: FeatureSet::default(),
        }
    }

    pub fn has_distance_maps(&self) -> bool {
        self.wall_dmap.is_some() && self.curb_dmap.is_some()
    }
}

fn trace_free(grid: &mut OccupancyGrid, from: (usize, usize), to: (usize, usize)) {
    let (mut x0, mut y0) = (from.0 as isize, from.1 as isize);
    let (x1, y1) = (to.0 as isize, to.1 as isize);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        let k = grid.index(x0 as usize, y0 as usize);
        if grid.cells[k] == CellClass::Unknown {
            grid.cells[k] = CellClass::Free;
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Classifies a leveled cloud into wall / curb / free / unknown cells.
///
/// Wall cells hold at least `min_hits` returns inside the wall height band,
/// curb cells hold at least one curb point, and free space is traced from the
/// sensor to the farthest return of every azimuth column.
pub fn project_cloud(cloud: &PointCloud, curbs: &[Vec3], cfg: &GridConfig) -> Result<ScanRecord, GridError> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(GridError::EmptyCloud);
    }
    let mut grid = cfg.empty_grid();
    let sensor = grid
        .cell_of(&Vec2::zeros())
        .ok_or_else(|| GridError::InvalidConfig("sensor outside grid".into()))?;

    // farthest in-grid return per azimuth column
    let columns = match &cloud.structure {
        Some(s) => s.azimuth_bins as usize,
        None => 1024,
    };
    let mut far: Vec<Option<(f64, (usize, usize))>> = vec![None; columns];
    let mut hits = vec![0u16; grid.cells.len()];
    for (k, p) in cloud.points.iter().enumerate() {
        let xy = p.xy();
        let Some(cell) = grid.cell_of(&xy) else { continue };
        let col = match &cloud.structure {
            Some(s) => s.azimuth[k] as usize,
            None => {
                let a = xy.y.atan2(xy.x);
                (((a + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * columns as f64) as usize).min(columns - 1)
            }
        };
        let r2 = xy.norm_squared();
        if far[col].is_none_or(|(d, _)| r2 > d) {
            far[col] = Some((r2, cell));
        }
        if p.z >= cfg.wall_zmin && p.z <= cfg.wall_zmax {
            let idx = grid.index(cell.0, cell.1);
            hits[idx] = hits[idx].saturating_add(1);
        }
    }
    for (_, cell) in far.into_iter().flatten() {
        trace_free(&mut grid, sensor, cell);
    }
    for c in curbs {
        if let Some((i, j)) = grid.cell_of(&c.xy()) {
            grid.set(i, j, CellClass::Curb);
        }
    }
    for (idx, &h) in hits.iter().enumerate() {
        if h as usize >= cfg.min_hits {
            grid.cells[idx] = CellClass::Wall;
        }
    }
    Ok(ScanRecord::from_grid(grid))
}

/// Fills the wall and curb distance maps. Absent classes yield flagged
/// all-`d_max` maps.
pub fn build_distance_maps(mut rec: ScanRecord, d_max: f64) -> ScanRecord {
    rec.wall_dmap = Some(distance_transform_flagged(&rec.grid, CellClass::Wall, d_max));
    rec.curb_dmap = Some(distance_transform_flagged(&rec.grid, CellClass::Curb, d_max));
    rec
}

/// Knobs for turning a raw scan into a [`ScanRecord`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanPipelineConfig {
    pub grid: GridConfig,
    pub curb: CurbParams,
    pub features: FeatureParams,
}

/// Curb detection, leveling, projection, distance maps and both feature kinds.
/// A scan whose curb stage fails (too few returns, no structure) is projected
/// unleveled and without curbs.
pub fn process_scan(cloud: &PointCloud, cfg: &ScanPipelineConfig) -> Result<ScanRecord, GridError> {
    let (leveled, curbs) = match detect_curbs(cloud, &cfg.curb) {
        Ok(det) => (det.level_cloud(cloud), det.points),
        Err(CurbError::InvalidParams(m)) => return Err(GridError::InvalidConfig(m)),
        Err(_) => (cloud.clone(), Vec::new()),
    };
    let rec = project_cloud(&leveled, &curbs, &cfg.grid)?;
    Ok(finish_record(rec, cfg))
}

/// Distance maps plus both feature kinds for a projected record.
pub fn finish_record(rec: ScanRecord, cfg: &ScanPipelineConfig) -> ScanRecord {
    let mut rec = build_distance_maps(rec, cfg.grid.d_max);
    rec.features = FeatureSet {
        oriented: detect_features(&rec.grid, FeatureKind::OrientedBinary, &cfg.features),
        corners: detect_features(&rec.grid, FeatureKind::CornerScore, &cfg.features),
    };
    rec
}
