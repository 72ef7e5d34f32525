//! Graph of locations built from a ground-truth run, plus its on-disk form.
//!
//! A map directory holds `map.json` (poses, edges, pipeline settings, blob
//! checksums) and one binary blob per location under `locations/`. Byte
//! layouts are documented in `docs/FORMATS.md`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{decode_grid, encode_grid, PointCloud, Pose2D};
use crate::grid::{finish_record, process_scan, GridError, ScanPipelineConfig, ScanRecord};
use crate::place_recognition::{descriptor_from_bytes, descriptor_to_bytes, PlaceDescriptor, PlaceEncoder, PlaceError};

pub const MAP_FORMAT: &str = "topoloc-map";
pub const MAP_VERSION: u32 = 1;
const BLOB_MAGIC: &[u8; 4] = b"TLLC";
const BLOB_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("run has no frames")]
    EmptyRun,
    #[error("{clouds} clouds but {poses} poses")]
    LengthMismatch { clouds: usize, poses: usize },
    #[error("invalid map configuration: {0}")]
    InvalidConfig(String),
    #[error("scan processing failed: {0}")]
    Scan(#[from] GridError),
    #[error("place encoding failed: {0}")]
    Encode(#[from] PlaceError),
    #[error("corrupt map: {0}")]
    CorruptMap(String),
    #[error("map io: {0}")]
    Io(String),
    #[error("unknown location {0}")]
    UnknownLocation(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    /// A frame becomes a location when it is at least this far from all
    /// existing locations, meters. Kept below `edge_radius` so consecutive
    /// locations are always linked.
    pub node_spacing: f64,
    /// Locations closer than this are linked, meters.
    pub edge_radius: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            node_spacing: 4.0,
            edge_radius: 5.0,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<(), MapError> {
        if !(self.node_spacing > 0.0) || !(self.edge_radius > 0.0) {
            return Err(MapError::InvalidConfig(
                "node_spacing and edge_radius must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    /// Equal to the location's index in [`TopoMap::locations`].
    pub id: usize,
    /// Ground-truth pose from the mapping run.
    pub pose: Pose2D,
    pub rec: ScanRecord,
    pub descriptor: PlaceDescriptor,
    /// Frame of the mapping run this location was created from.
    pub frame: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    /// `pose_i^-1 * pose_j`.
    pub rel: Pose2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopoMap {
    pub locations: Vec<Location>,
    pub edges: Vec<Edge>,
    pub config: MapConfig,
    /// Settings every query scan must be processed with.
    pub pipeline: ScanPipelineConfig,
    adjacency: Vec<Vec<usize>>,
}

impl TopoMap {
    /// Links every location pair closer than `config.edge_radius`.
    pub fn new(locations: Vec<Location>, config: MapConfig, pipeline: ScanPipelineConfig) -> Self {
        let mut edges = Vec::new();
        for i in 0..locations.len() {
            for j in i + 1..locations.len() {
                let (pi, pj) = (&locations[i].pose, &locations[j].pose);
                if (pi.translation() - pj.translation()).norm() < config.edge_radius {
                    edges.push(Edge {
                        i,
                        j,
                        rel: pi.between(pj),
                    });
                }
            }
        }
        Self::with_edges(locations, edges, config, pipeline)
    }

    fn with_edges(locations: Vec<Location>, edges: Vec<Edge>, config: MapConfig, pipeline: ScanPipelineConfig) -> Self {
        let mut adjacency = vec![Vec::new(); locations.len()];
        for (k, e) in edges.iter().enumerate() {
            adjacency[e.i].push(k);
            adjacency[e.j].push(k);
        }
        Self {
            locations,
            edges,
            config,
            pipeline,
            adjacency,
        }
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn location(&self, v: usize) -> Result<&Location, MapError> {
        self.locations.get(v).ok_or(MapError::UnknownLocation(v))
    }

    /// Adjacent locations with the relative pose of each as seen from `v`.
    pub fn neighbors(&self, v: usize) -> Result<Vec<(usize, Pose2D)>, MapError> {
        let adj = self.adjacency.get(v).ok_or(MapError::UnknownLocation(v))?;
        Ok(adj
            .iter()
            .map(|&k| {
                let e = &self.edges[k];
                if e.i == v {
                    (e.j, e.rel)
                } else {
                    (e.i, e.rel.inverse())
                }
            })
            .collect())
    }

    /// Location whose pose is nearest to `p` (ties go to the lower id).
    pub fn nearest(&self, p: &Pose2D) -> Option<usize> {
        self.locations
            .iter()
            .map(|l| (l.id, (l.pose.translation() - p.translation()).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(id, _)| id)
    }

    pub fn descriptor_dim(&self) -> usize {
        self.locations.first().map_or(0, |l| l.descriptor.dim())
    }
}

/// Frames chosen as locations: the first, then every frame at least
/// `spacing` from all locations chosen so far.
pub fn select_location_frames(poses: &[Pose2D], spacing: f64) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    for (t, p) in poses.iter().enumerate() {
        let far = chosen
            .iter()
            .all(|&c| (poses[c].translation() - p.translation()).norm() >= spacing);
        if far {
            chosen.push(t);
        }
    }
    chosen
}

/// Builds the map: location selection, full scan processing and encoding per
/// location (in parallel), then edges.
pub fn build_map(
    clouds: &[PointCloud],
    poses: &[Pose2D],
    config: &MapConfig,
    pipeline: &ScanPipelineConfig,
    encoder: &dyn PlaceEncoder,
) -> Result<TopoMap, MapError> {
    config.validate()?;
    if clouds.len() != poses.len() {
        return Err(MapError::LengthMismatch {
            clouds: clouds.len(),
            poses: poses.len(),
        });
    }
    if poses.is_empty() {
        return Err(MapError::EmptyRun);
    }
    let frames = select_location_frames(poses, config.node_spacing);
    let locations = frames
        .par_iter()
        .enumerate()
        .map(|(id, &t)| {
            let rec = process_scan(&clouds[t], pipeline)?;
            let descriptor = encoder.encode(&rec, Some(t))?;
            Ok(Location {
                id,
                pose: poses[t],
                rec,
                descriptor,
                frame: t,
            })
        })
        .collect::<Result<Vec<_>, MapError>>()?;
    let dim = locations[0].descriptor.dim();
    if let Some(l) = locations.iter().find(|l| l.descriptor.dim() != dim) {
        return Err(PlaceError::DimensionMismatch {
            expected: dim,
            found: l.descriptor.dim(),
        }
        .into());
    }
    Ok(TopoMap::new(locations, config.clone(), pipeline.clone()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapIndex {
    format: String,
    version: u32,
    descriptor_dim: usize,
    config: MapConfig,
    pipeline: ScanPipelineConfig,
    locations: Vec<LocationEntry>,
    edges: Vec<Edge>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LocationEntry {
    id: usize,
    pose: Pose2D,
    frame: usize,
    blob: String,
    bytes: usize,
    crc32: u32,
}

/// Grid and descriptor of one location. Distance maps, point lists and
/// features are functions of the grid and are rebuilt on load.
pub fn location_to_bytes(loc: &Location) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&encode_grid(&loc.rec.grid));
    out.extend_from_slice(&descriptor_to_bytes(&loc.descriptor));
    out
}

fn location_from_bytes(buf: &[u8], entry: &LocationEntry, pipeline: &ScanPipelineConfig) -> Result<Location, MapError> {
    let corrupt = |m: String| MapError::CorruptMap(m);
    if buf.len() < 8 || &buf[..4] != BLOB_MAGIC {
        return Err(corrupt(format!("{}: bad blob header", entry.blob)));
    }
    if u16::from_le_bytes([buf[4], buf[5]]) != BLOB_VERSION {
        return Err(corrupt(format!("{}: unsupported blob version", entry.blob)));
    }
    let mut pos = 8;
    let (grid, used) = decode_grid(&buf[pos..]).map_err(|e| corrupt(format!("{}: {e}", entry.blob)))?;
    pos += used;
    let (descriptor, used) = descriptor_from_bytes(&buf[pos..]).map_err(|e| corrupt(format!("{}: {e}", entry.blob)))?;
    pos += used;
    if pos != buf.len() {
        return Err(corrupt(format!("{}: trailing bytes", entry.blob)));
    }
    let rec = finish_record(ScanRecord::from_grid(grid), pipeline);
    Ok(Location {
        id: entry.id,
        pose: entry.pose,
        rec,
        descriptor,
        frame: entry.frame,
    })
}

fn io_err(path: &Path, e: std::io::Error) -> MapError {
    MapError::Io(format!("{}: {e}", path.display()))
}

/// Writes `map.json` and `locations/NNNNNN.bin` under `dir`.
pub fn save_map(map: &TopoMap, dir: &Path) -> Result<(), MapError> {
    let loc_dir = dir.join("locations");
    std::fs::create_dir_all(&loc_dir).map_err(|e| io_err(&loc_dir, e))?;
    let mut entries = Vec::with_capacity(map.len());
    for loc in &map.locations {
        let bytes = location_to_bytes(loc);
        let name = format!("locations/{:06}.bin", loc.id);
        let path = dir.join(&name);
        std::fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
        entries.push(LocationEntry {
            id: loc.id,
            pose: loc.pose,
            frame: loc.frame,
            blob: name,
            bytes: bytes.len(),
            crc32: crc32fast::hash(&bytes),
        });
    }
    let index = MapIndex {
        format: MAP_FORMAT.into(),
        version: MAP_VERSION,
        descriptor_dim: map.descriptor_dim(),
        config: map.config.clone(),
        pipeline: map.pipeline.clone(),
        locations: entries,
        edges: map.edges.clone(),
    };
    let json = serde_json::to_string_pretty(&index).expect("map index serializes");
    let path = dir.join("map.json");
    std::fs::write(&path, json).map_err(|e| io_err(&path, e))
}

pub fn load_map(dir: &Path) -> Result<TopoMap, MapError> {
    let path = dir.join("map.json");
    let text = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
    let index: MapIndex = serde_json::from_slice(&text).map_err(|e| MapError::CorruptMap(format!("map.json: {e}")))?;
    if index.format != MAP_FORMAT || index.version != MAP_VERSION {
        return Err(MapError::CorruptMap("map.json: unknown format or version".into()));
    }
    let n = index.locations.len();
    if n == 0 {
        return Err(MapError::CorruptMap("map has no locations".into()));
    }
    if index.locations.iter().enumerate().any(|(k, e)| e.id != k) {
        return Err(MapError::CorruptMap("location ids are not 0..n".into()));
    }
    if index.edges.iter().any(|e| e.i >= n || e.j >= n || e.i == e.j) {
        return Err(MapError::CorruptMap("edge references a missing location".into()));
    }
    let locations = index
        .locations
        .par_iter()
        .map(|entry| {
            let p = dir.join(&entry.blob);
            let buf = std::fs::read(&p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => MapError::CorruptMap(format!("{}: missing", entry.blob)),
                _ => io_err(&p, e),
            })?;
            if buf.len() != entry.bytes || crc32fast::hash(&buf) != entry.crc32 {
                return Err(MapError::CorruptMap(format!("{}: checksum mismatch", entry.blob)));
            }
            let loc = location_from_bytes(&buf, entry, &index.pipeline)?;
            if loc.descriptor.dim() != index.descriptor_dim {
                return Err(MapError::CorruptMap(format!("{}: descriptor dimension", entry.blob)));
            }
            Ok(loc)
        })
        .collect::<Result<Vec<_>, MapError>>()?;
    Ok(TopoMap::with_edges(
        locations,
        index.edges,
        index.config,
        index.pipeline,
    ))
}

/// Total bytes a map occupies on disk (index plus blobs).
pub fn map_size_on_disk(dir: &Path) -> std::io::Result<u64> {
    let mut total = std::fs::metadata(dir.join("map.json"))?.len();
    for e in std::fs::read_dir(dir.join("locations"))? {
        total += e?.metadata()?.len();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{normalize_angle, OccupancyGrid, Vec2};
    use crate::place_recognition::PolarSpectrumEncoder;
    use crate::sim::{generate_world, simulate_scan, LidarModel, WorldParams};

    fn stub_location(id: usize, pose: Pose2D) -> Location {
        Location {
            id,
            pose,
            rec: ScanRecord::from_grid(OccupancyGrid::centered(0.2, 4.0)),
            descriptor: PlaceDescriptor::normalized(vec![1.0, id as f32]).unwrap(),
            frame: id,
        }
    }

    fn chain(xs: &[f64]) -> TopoMap {
        let locs = xs
            .iter()
            .enumerate()
            .map(|(k, &x)| stub_location(k, Pose2D::new(x, 0.0, 0.1 * k as f64)))
            .collect();
        TopoMap::new(locs, MapConfig::default(), ScanPipelineConfig::default())
    }

    fn stub_map(poses: &[Pose2D], cfg: &MapConfig) -> TopoMap {
        let locs = select_location_frames(poses, cfg.node_spacing)
            .iter()
            .enumerate()
            .map(|(id, &t)| stub_location(id, poses[t]))
            .collect();
        TopoMap::new(locs, cfg.clone(), ScanPipelineConfig::default())
    }

    #[test]
    fn straight_run_spacing_and_edges() {
        let poses: Vec<Pose2D> = (0..=40).map(|k| Pose2D::new(0.5 * k as f64, 0.0, 0.0)).collect();
        let frames = select_location_frames(&poses, 5.0);
        let xs: Vec<f64> = frames.iter().map(|&t| poses[t].x).collect();
        assert_eq!(xs, vec![0.0, 5.0, 10.0, 15.0, 20.0]);
        // exactly 5 m apart is not "closer than 5 m"
        let five = MapConfig {
            node_spacing: 5.0,
            ..MapConfig::default()
        };
        assert!(stub_map(&poses, &five).edges.is_empty());

        let m = stub_map(&poses, &MapConfig::default());
        let xs: Vec<f64> = m.locations.iter().map(|l| l.pose.x).collect();
        assert_eq!(xs, vec![0.0, 4.0, 8.0, 12.0, 16.0, 20.0]);
        let pairs: Vec<(usize, usize)> = m.edges.iter().map(|e| (e.i, e.j)).collect();
        assert_eq!(pairs, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
    }

    #[test]
    fn singleton_and_unknown() {
        let m = chain(&[0.0]);
        assert!(m.edges.is_empty());
        assert!(m.neighbors(0).unwrap().is_empty());
        assert_eq!(m.neighbors(1), Err(MapError::UnknownLocation(1)));
    }

    #[test]
    fn chain_neighbors_and_inverse_symmetry() {
        let m = chain(&[0.0, 3.0, 6.0]);
        let mut nb: Vec<usize> = m.neighbors(1).unwrap().into_iter().map(|(v, _)| v).collect();
        nb.sort();
        assert_eq!(nb, vec![0, 2]);
        for e in &m.edges {
            let fwd = m
                .neighbors(e.i)
                .unwrap()
                .into_iter()
                .find(|(v, _)| *v == e.j)
                .unwrap()
                .1;
            let back = m
                .neighbors(e.j)
                .unwrap()
                .into_iter()
                .find(|(v, _)| *v == e.i)
                .unwrap()
                .1;
            let id = fwd.compose(&back);
            assert!(id.translation_norm() < 1e-9 && id.theta.abs() < 1e-9);
            // rel pose really is the pose difference
            let pj = m.locations[e.i].pose.compose(&fwd);
            let (dt, dr) = pj.error_to(&m.locations[e.j].pose);
            assert!(dt < 1e-9 && dr < 1e-9);
            assert!(fwd.translation_norm() < 5.0);
        }
    }

    #[test]
    fn loop_closes_with_an_edge() {
        // square loop of side 20.5 m at 0.5 m steps, stopping 2.5 m short of the start
        let side = 20.5;
        let poses: Vec<Pose2D> = (0..160)
            .map(|k| {
                let s = 0.5 * k as f64;
                let p = match (s / side) as usize {
                    0 => Vec2::new(s, 0.0),
                    1 => Vec2::new(side, s - side),
                    2 => Vec2::new(3.0 * side - s, side),
                    _ => Vec2::new(0.0, 4.0 * side - s),
                };
                Pose2D::new(p.x, p.y, 0.0)
            })
            .collect();
        assert!(poses.last().unwrap().translation().norm() < 4.0);
        let m = stub_map(&poses, &MapConfig::default());
        let last = m.len() - 1;
        assert!(
            m.edges.iter().any(|e| e.i == 0 && e.j == last),
            "{:?}",
            m.locations.last().unwrap().pose
        );
        assert!(m.edges.iter().all(|e| e.rel.translation_norm() < 5.0));
    }

    #[test]
    fn build_rejects_bad_input() {
        let enc = PolarSpectrumEncoder::default();
        let cfg = MapConfig::default();
        let pc = ScanPipelineConfig::default();
        assert_eq!(build_map(&[], &[], &cfg, &pc, &enc), Err(MapError::EmptyRun));
        assert!(matches!(
            build_map(&[PointCloud::default()], &[], &cfg, &pc, &enc),
            Err(MapError::LengthMismatch { .. })
        ));
    }

    fn small_real_map() -> TopoMap {
        let world = generate_world(7, &WorldParams::default()).unwrap();
        let poses: Vec<Pose2D> = (0..4).map(|k| Pose2D::new(37.0 + 3.0 * k as f64, 7.0, 0.0)).collect();
        let clouds: Vec<PointCloud> = poses
            .iter()
            .enumerate()
            .map(|(k, p)| simulate_scan(&world, p, &LidarModel::default(), k as u64).unwrap())
            .collect();
        let cfg = MapConfig {
            node_spacing: 2.0,
            ..MapConfig::default()
        };
        build_map(
            &clouds,
            &poses,
            &cfg,
            &ScanPipelineConfig::default(),
            &PolarSpectrumEncoder::default(),
        )
        .unwrap()
    }

    #[test]
    fn index_poses_parse_back_bit_exact() {
        let mut x = 0.1f64;
        for _ in 0..10_000 {
            x = (x * 3.7 + 0.123).fract();
            let p = Pose2D::new(300.0 * x, -x / 7.0, normalize_angle(x * 40.0));
            let back: Pose2D = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let map = small_real_map();
        assert_eq!(map.len(), 4);
        assert!(map
            .locations
            .iter()
            .all(|l| l.rec.has_distance_maps() && !l.rec.features.oriented.is_empty()));
        let dir = tempfile::tempdir().unwrap();
        save_map(&map, dir.path()).unwrap();
        let back = load_map(dir.path()).unwrap();
        assert_eq!(back, map);
        let per_loc = map_size_on_disk(dir.path()).unwrap() / map.len() as u64;
        assert!(per_loc <= 64 * 1024, "{per_loc} bytes per location");

        // truncated blob
        let blob = dir.path().join("locations/000002.bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_map(dir.path()), Err(MapError::CorruptMap(_))));
        // flipped byte, same length
        let mut flipped = bytes.clone();
        flipped[100] ^= 0xff;
        std::fs::write(&blob, &flipped).unwrap();
        assert!(matches!(load_map(dir.path()), Err(MapError::CorruptMap(_))));
        std::fs::write(&blob, &bytes).unwrap();
        assert!(load_map(dir.path()).is_ok());
        // truncated index
        let idx = dir.path().join("map.json");
        let text = std::fs::read(&idx).unwrap();
        std::fs::write(&idx, &text[..text.len() / 3]).unwrap();
        assert!(matches!(load_map(dir.path()), Err(MapError::CorruptMap(_))));
        assert!(matches!(load_map(&dir.path().join("nope")), Err(MapError::Io(_))));
    }
}
