//! Synthetic urban world, spinning-LiDAR ray caster and noisy odometry runs.
//!
//! The world is flat road (z = 0) with raised sidewalk blocks whose vertical
//! edges are the curbs, plus building and obstacle boxes. Everything is an
//! oriented box, so a single slab test covers walls, curb faces and sidewalk tops.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PointCloud, Pose2D, RingStructure, Vec2, Vec3};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("pose ({0:.2}, {1:.2}) is outside the world bounds")]
    OutOfBounds(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxKind {
    Sidewalk,
    Building,
    Obstacle,
}

/// Oriented box standing on the ground plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldBox {
    pub center: [f64; 2],
    pub half_extents: [f64; 2],
    pub yaw: f64,
    pub height: f64,
    pub kind: BoxKind,
}

impl WorldBox {
    pub fn axis_aligned(min: Vec2, max: Vec2, height: f64, kind: BoxKind) -> Self {
        Self {
            center: [(min.x + max.x) / 2.0, (min.y + max.y) / 2.0],
            half_extents: [(max.x - min.x) / 2.0, (max.y - min.y) / 2.0],
            yaw: 0.0,
            height,
            kind,
        }
    }

    fn frame(&self) -> Pose2D {
        Pose2D::new(self.center[0], self.center[1], self.yaw)
    }

    /// Ray origin expressed in the box frame, reused for every beam of a scan.
    fn prepare(&self, origin: &Vec3) -> LocalBox<'_> {
        let inv = self.frame().inverse();
        let o2 = inv.apply(&Vec2::new(origin.x, origin.y));
        let (s, c) = inv.theta.sin_cos();
        LocalBox {
            b: self,
            o: [o2.x, o2.y, origin.z],
            s,
            c,
        }
    }

    pub fn contains_xy(&self, p: &Vec2) -> bool {
        let q = self.frame().inverse().apply(p);
        q.x.abs() <= self.half_extents[0] && q.y.abs() <= self.half_extents[1]
    }

    /// Distance from a point to the box outline in the plane.
    pub fn outline_distance(&self, p: &Vec2) -> f64 {
        let q = self.frame().inverse().apply(p);
        let dx = q.x.abs() - self.half_extents[0];
        let dy = q.y.abs() - self.half_extents[1];
        if dx <= 0.0 && dy <= 0.0 {
            (-dx).min(-dy)
        } else {
            dx.max(0.0).hypot(dy.max(0.0))
        }
    }

    fn bounding_radius(&self) -> f64 {
        self.half_extents[0].hypot(self.half_extents[1])
    }
}

struct LocalBox<'a> {
    b: &'a WorldBox,
    o: [f64; 3],
    s: f64,
    c: f64,
}

impl LocalBox<'_> {
    /// Entry distance of a ray, if it hits the box.
    fn intersect(&self, dir: &Vec3) -> Option<f64> {
        let (b, o) = (self.b, &self.o);
        let d = [self.c * dir.x - self.s * dir.y, self.s * dir.x + self.c * dir.y, dir.z];
        let lo = [-b.half_extents[0], -b.half_extents[1], 0.0];
        let hi = [b.half_extents[0], b.half_extents[1], b.height];
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k] < lo[k] || o[k] > hi[k] {
                    return None;
                }
                continue;
            }
            let a = (lo[k] - o[k]) / d[k];
            let e = (hi[k] - o[k]) / d[k];
            let (near, far) = if a < e { (a, e) } else { (e, a) };
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        // rays starting inside a box see nothing of it
        if t0 <= 0.0 {
            return None;
        }
        Some(t0)
    }
}

/// Road centerline segment between two sidewalk blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub a: [f64; 2],
    pub b: [f64; 2],
    /// Lateral distance from the centerline to the curb.
    pub curb_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub boxes: Vec<WorldBox>,
    pub roads: Vec<Road>,
    pub curb_height: f64,
    /// (min_x, min_y, max_x, max_y)
    pub bounds: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldParams {
    pub blocks_x: usize,
    pub blocks_y: usize,
    pub block_size: f64,
    pub road_width: f64,
    pub curb_height: f64,
    /// 0 produces a roads-and-curbs-only world.
    pub max_buildings_per_block: usize,
    pub building_setback: f64,
    pub min_building_height: f64,
    pub max_building_height: f64,
    /// Mean spacing of street furniture (poles, bins, kiosks) along each
    /// sidewalk edge; 0 disables it.
    pub obstacle_spacing: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            blocks_x: 4,
            blocks_y: 4,
            block_size: 60.0,
            road_width: 14.0,
            curb_height: 0.15,
            max_buildings_per_block: 4,
            building_setback: 3.0,
            min_building_height: 6.0,
            max_building_height: 20.0,
            obstacle_spacing: 6.0,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidParams(m.to_string()));
        if self.blocks_x == 0 || self.blocks_y == 0 {
            return bad("block counts must be >= 1");
        }
        if !(self.block_size > 2.0 * self.building_setback + 4.0) {
            return bad("block_size too small for the building setback");
        }
        if !(self.road_width > 0.0) {
            return bad("road_width must be > 0");
        }
        if !(self.curb_height > 0.0 && self.curb_height <= 0.3) {
            return bad("curb_height must be in (0, 0.3]");
        }
        if !(self.obstacle_spacing >= 0.0) {
            return bad("obstacle_spacing must be >= 0");
        }
        if !(self.min_building_height > 0.0 && self.max_building_height >= self.min_building_height) {
            return bad("building heights must satisfy 0 < min <= max");
        }
        Ok(())
    }

    /// Distance between consecutive road centerlines.
    pub fn pitch(&self) -> f64 {
        self.block_size + self.road_width
    }

    /// Centerline coordinate of road `k` (0..=blocks) along one axis.
    pub fn road_center(&self, k: usize) -> f64 {
        k as f64 * self.pitch()
    }
}

/// Grid of sidewalk blocks separated by roads, with a randomized cluster of
/// buildings on each block. Road centerlines lie at multiples of the pitch,
/// starting at 0, so the world spans a little beyond `[0, blocks * pitch]`.
pub fn generate_world(seed: u64, params: &WorldParams) -> Result<World, SimError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pitch = params.pitch();
    let half_road = params.road_width / 2.0;
    let mut boxes = Vec::new();
    let mut roads = Vec::new();
    let span_x = params.blocks_x as f64 * pitch;
    let span_y = params.blocks_y as f64 * pitch;
    for bi in 0..params.blocks_x {
        for bj in 0..params.blocks_y {
            let min = Vec2::new(bi as f64 * pitch + half_road, bj as f64 * pitch + half_road);
            let max = min + Vec2::new(params.block_size, params.block_size);
            boxes.push(WorldBox::axis_aligned(min, max, params.curb_height, BoxKind::Sidewalk));
            if params.max_buildings_per_block == 0 {
                continue;
            }
            let n = rng.random_range(1..=params.max_buildings_per_block);
            let inner = params.block_size - 2.0 * params.building_setback;
            for _ in 0..n {
                // keep the rotated footprint inside the setback region
                let yaw: f64 = rng.random_range(-0.35..0.35);
                let hx: f64 = rng.random_range(0.12..0.3) * inner;
                let hy: f64 = rng.random_range(0.12..0.3) * inner;
                let rx = hx * yaw.cos().abs() + hy * yaw.sin().abs();
                let ry = hx * yaw.sin().abs() + hy * yaw.cos().abs();
                let lo = Vec2::new(
                    min.x + params.building_setback + rx,
                    min.y + params.building_setback + ry,
                );
                let hi = Vec2::new(
                    max.x - params.building_setback - rx,
                    max.y - params.building_setback - ry,
                );
                let cx = if hi.x > lo.x {
                    rng.random_range(lo.x..hi.x)
                } else {
                    (min.x + max.x) / 2.0
                };
                let cy = if hi.y > lo.y {
                    rng.random_range(lo.y..hi.y)
                } else {
                    (min.y + max.y) / 2.0
                };
                let height = rng.random_range(params.min_building_height..=params.max_building_height);
                boxes.push(WorldBox {
                    center: [cx, cy],
                    half_extents: [hx, hy],
                    yaw,
                    height,
                    kind: BoxKind::Building,
                });
            }
            if params.obstacle_spacing > 0.0 {
                place_street_furniture(&mut rng, &mut boxes, min, max, params.obstacle_spacing);
            }
        }
    }
    for k in 0..=params.blocks_y {
        let y = params.road_center(k);
        roads.push(Road {
            a: [0.0, y],
            b: [span_x, y],
            curb_offset: half_road,
        });
    }
    for k in 0..=params.blocks_x {
        let x = params.road_center(k);
        roads.push(Road {
            a: [x, 0.0],
            b: [x, span_y],
            curb_offset: half_road,
        });
    }
    Ok(World {
        boxes,
        roads,
        curb_height: params.curb_height,
        bounds: [-half_road, -half_road, span_x + half_road, span_y + half_road],
    })
}

/// Small boxes just inside each edge of a sidewalk block.
fn place_street_furniture(rng: &mut ChaCha8Rng, boxes: &mut Vec<WorldBox>, min: Vec2, max: Vec2, spacing: f64) {
    let size = max - min;
    // (start corner, direction along the edge, inward normal, edge length)
    let edges = [
        (min, Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0), size.x),
        (
            Vec2::new(min.x, max.y),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, -1.0),
            size.x,
        ),
        (min, Vec2::new(0.0, 1.0), Vec2::new(1.0, 0.0), size.y),
        (
            Vec2::new(max.x, min.y),
            Vec2::new(0.0, 1.0),
            Vec2::new(-1.0, 0.0),
            size.y,
        ),
    ];
    for (start, along, inward, len) in edges {
        let mut s = rng.random_range(0.2..1.0) * spacing;
        while s < len - 2.0 {
            let inset = rng.random_range(1.0..2.0);
            let c = start + along * s + inward * inset;
            boxes.push(WorldBox {
                center: [c.x, c.y],
                half_extents: [rng.random_range(0.15..0.6), rng.random_range(0.15..0.6)],
                yaw: rng.random_range(-0.8..0.8),
                height: rng.random_range(1.0..3.0),
                kind: BoxKind::Obstacle,
            });
            s += rng.random_range(0.5..1.5) * spacing;
        }
    }
}

impl World {
    /// Straight road along the x axis with sidewalk steps at `y = +-half_width`.
    pub fn street(half_width: f64, length: f64, curb_height: f64) -> World {
        let sidewalk = 30.0;
        World {
            boxes: vec![
                WorldBox::axis_aligned(
                    Vec2::new(-length / 2.0, half_width),
                    Vec2::new(length / 2.0, half_width + sidewalk),
                    curb_height,
                    BoxKind::Sidewalk,
                ),
                WorldBox::axis_aligned(
                    Vec2::new(-length / 2.0, -half_width - sidewalk),
                    Vec2::new(length / 2.0, -half_width),
                    curb_height,
                    BoxKind::Sidewalk,
                ),
            ],
            roads: vec![Road {
                a: [-length / 2.0, 0.0],
                b: [length / 2.0, 0.0],
                curb_offset: half_width,
            }],
            curb_height,
            bounds: [
                -length / 2.0,
                -half_width - sidewalk,
                length / 2.0,
                half_width + sidewalk,
            ],
        }
    }

    /// Empty flat plane.
    pub fn flat(extent: f64) -> World {
        World {
            boxes: Vec::new(),
            roads: Vec::new(),
            curb_height: 0.15,
            bounds: [-extent, -extent, extent, extent],
        }
    }

    pub fn with_box(mut self, b: WorldBox) -> World {
        self.boxes.push(b);
        self
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.bounds[0] && p.y >= self.bounds[1] && p.x <= self.bounds[2] && p.y <= self.bounds[3]
    }

    /// Number of blocks carrying at least one building.
    pub fn building_clusters(&self) -> usize {
        self.boxes
            .iter()
            .filter(|s| s.kind == BoxKind::Sidewalk)
            .filter(|s| {
                self.boxes
                    .iter()
                    .any(|b| b.kind == BoxKind::Building && s.contains_xy(&Vec2::new(b.center[0], b.center[1])))
            })
            .count()
    }

    /// Planar distance from a point to the nearest curb (sidewalk outline).
    pub fn curb_distance(&self, p: &Vec2) -> f64 {
        self.boxes
            .iter()
            .filter(|b| b.kind == BoxKind::Sidewalk)
            .map(|b| b.outline_distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

/// What a simulated beam hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitLabel {
    Road,
    SidewalkTop,
    CurbFace,
    Building,
    Obstacle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarModel {
    pub rings: usize,
    /// Ring elevation angles in radians, lowest ring first.
    pub elevations: Vec<f64>,
    pub azimuth_bins: usize,
    pub max_range: f64,
    pub range_noise: f64,
    /// Sensor height above the ground under the robot.
    pub mount_height: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self::uniform(16, -15.0, 3.0)
    }
}

impl LidarModel {
    /// Rings evenly spaced between two elevations given in degrees.
    pub fn uniform(rings: usize, lo_deg: f64, hi_deg: f64) -> Self {
        let (lo, hi) = (lo_deg.to_radians(), hi_deg.to_radians());
        let elevations = (0..rings)
            .map(|r| {
                if rings == 1 {
                    lo
                } else {
                    lo + (hi - lo) * r as f64 / (rings - 1) as f64
                }
            })
            .collect();
        Self {
            rings,
            elevations,
            azimuth_bins: 1024,
            max_range: 50.0,
            range_noise: 0.02,
            mount_height: 1.8,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.rings == 0 || self.elevations.len() != self.rings {
            return Err(SimError::InvalidParams(
                "rings must be >= 1 and match elevations".into(),
            ));
        }
        if self.azimuth_bins == 0 || self.azimuth_bins > u16::MAX as usize {
            return Err(SimError::InvalidParams("azimuth_bins out of range".into()));
        }
        if !(self.max_range > 0.0) || !(self.range_noise >= 0.0) || !(self.mount_height > 0.0) {
            return Err(SimError::InvalidParams(
                "max_range, noise and mount height must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Beam azimuth (robot frame) of column `a`.
    pub fn azimuth(&self, a: usize) -> f64 {
        -PI + (a as f64 + 0.5) * 2.0 * PI / self.azimuth_bins as f64
    }
}

/// Casts every beam of one revolution from `pose`. Points are returned in the
/// robot frame (ground under the robot at z = 0) with ring/azimuth indices.
pub fn simulate_scan(world: &World, pose: &Pose2D, lidar: &LidarModel, seed: u64) -> Result<PointCloud, SimError> {
    simulate_scan_labeled(world, pose, lidar, seed).map(|(c, _)| c)
}

/// [`simulate_scan`] plus the ground-truth surface label of every point.
pub fn simulate_scan_labeled(
    world: &World,
    pose: &Pose2D,
    lidar: &LidarModel,
    seed: u64,
) -> Result<(PointCloud, Vec<HitLabel>), SimError> {
    lidar.validate()?;
    if !world.contains(&pose.translation()) {
        return Err(SimError::OutOfBounds(pose.x, pose.y));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, lidar.range_noise.max(1e-300)).expect("valid sigma");
    let origin = Vec3::new(pose.x, pose.y, lidar.mount_height);
    let reach = lidar.max_range + 1.0;
    let nearby: Vec<LocalBox> = world
        .boxes
        .iter()
        .filter(|b| (Vec2::new(b.center[0], b.center[1]) - pose.translation()).norm() < reach + b.bounding_radius())
        .map(|b| b.prepare(&origin))
        .collect();

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut ring_idx = Vec::new();
    let mut az_idx = Vec::new();
    for (r, &elev) in lidar.elevations.iter().enumerate() {
        let (se, ce) = elev.sin_cos();
        for a in 0..lidar.azimuth_bins {
            let az = lidar.azimuth(a);
            let local = Vec3::new(ce * az.cos(), ce * az.sin(), se);
            let (s, c) = pose.theta.sin_cos();
            let dir = Vec3::new(c * local.x - s * local.y, s * local.x + c * local.y, local.z);
            let mut best: Option<(f64, HitLabel)> = None;
            if dir.z < 0.0 {
                best = Some((origin.z / -dir.z, HitLabel::Road));
            }
            for lb in &nearby {
                let b = lb.b;
                if let Some(t) = lb.intersect(&dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        let hit_z = origin.z + t * dir.z;
                        let label = match b.kind {
                            BoxKind::Sidewalk if hit_z >= b.height - 1e-9 => HitLabel::SidewalkTop,
                            BoxKind::Sidewalk => HitLabel::CurbFace,
                            BoxKind::Building => HitLabel::Building,
                            BoxKind::Obstacle => HitLabel::Obstacle,
                        };
                        best = Some((t, label));
                    }
                }
            }
            // draw noise for every beam so streams do not depend on hits
            let eps = if lidar.range_noise > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            let Some((t, label)) = best else { continue };
            if t > lidar.max_range {
                continue;
            }
            let t = (t + eps).max(0.0);
            points.push(Vec3::new(0.0, 0.0, lidar.mount_height) + local * t);
            labels.push(label);
            ring_idx.push(r as u16);
            az_idx.push(a as u16);
        }
    }
    Ok((
        PointCloud {
            points,
            structure: Some(RingStructure {
                rings: lidar.rings as u16,
                azimuth_bins: lidar.azimuth_bins as u16,
                ring: ring_idx,
                azimuth: az_idx,
            }),
        },
        labels,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdometryNoise {
    /// Relative (multiplicative) noise sigma on each increment component.
    pub scale_sigma: f64,
    pub trans_sigma: f64,
    pub rot_sigma: f64,
}

impl Default for OdometryNoise {
    fn default() -> Self {
        Self {
            scale_sigma: 0.01,
            trans_sigma: 0.01,
            rot_sigma: 0.002,
        }
    }
}

impl OdometryNoise {
    pub fn none() -> Self {
        Self {
            scale_sigma: 0.0,
            trans_sigma: 0.0,
            rot_sigma: 0.0,
        }
    }
}

/// One recorded run: scans, ground-truth poses and per-step odometry increments.
/// `odometry[0]` is the identity; `odometry[t]` approximates `gt[t-1]^-1 * gt[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDataset {
    pub timestamps: Vec<f64>,
    pub frames: Vec<PointCloud>,
    pub gt_poses: Vec<Pose2D>,
    pub odometry: Vec<Pose2D>,
}

impl RunDataset {
    pub fn len(&self) -> usize {
        self.gt_poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_poses.is_empty()
    }

    /// Composes odometry from the first ground-truth pose.
    pub fn dead_reckoning(&self) -> Vec<Pose2D> {
        let mut out = Vec::with_capacity(self.len());
        let mut cur = self.gt_poses.first().copied().unwrap_or_default();
        for (t, o) in self.odometry.iter().enumerate() {
            if t > 0 {
                cur = cur.compose(o);
            }
            out.push(cur);
        }
        out
    }
}

fn mix_seed(seed: u64, k: u64) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Noisy odometry increments for a trajectory, without simulating scans.
pub fn noisy_odometry(trajectory: &[Pose2D], noise: &OdometryNoise, seed: u64) -> Vec<Pose2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(trajectory.len());
    for t in 0..trajectory.len() {
        if t == 0 {
            out.push(Pose2D::identity());
            continue;
        }
        let d = trajectory[t - 1].between(&trajectory[t]);
        let mut g = || std.sample(&mut rng);
        let x = d.x * (1.0 + noise.scale_sigma * g()) + noise.trans_sigma * g();
        let y = d.y * (1.0 + noise.scale_sigma * g()) + noise.trans_sigma * g();
        let th = d.theta * (1.0 + noise.scale_sigma * g()) + noise.rot_sigma * g();
        out.push(Pose2D::new(x, y, th));
    }
    out
}

/// Simulates scans along `trajectory` (in parallel, deterministically) and
/// generates noisy odometry increments.
pub fn simulate_run(
    world: &World,
    trajectory: &[Pose2D],
    lidar: &LidarModel,
    noise: &OdometryNoise,
    dt: f64,
    seed: u64,
) -> Result<RunDataset, SimError> {
    lidar.validate()?;
    if let Some(p) = trajectory.iter().find(|p| !world.contains(&p.translation())) {
        return Err(SimError::OutOfBounds(p.x, p.y));
    }
    let frames = trajectory
        .par_iter()
        .enumerate()
        .map(|(t, p)| simulate_scan(world, p, lidar, mix_seed(seed, t as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunDataset {
        timestamps: (0..trajectory.len()).map(|t| t as f64 * dt).collect(),
        frames,
        gt_poses: trajectory.to_vec(),
        odometry: noisy_odometry(trajectory, noise, seed),
    })
}

/// Densifies a polyline of waypoints into poses spaced `step` meters apart,
/// heading along the direction of travel.
pub fn trajectory_from_waypoints(waypoints: &[Vec2], step: f64) -> Vec<Pose2D> {
    let mut out = Vec::new();
    if waypoints.is_empty() || step <= 0.0 {
        return out;
    }
    let mut carry = 0.0;
    for w in waypoints.windows(2) {
        let seg = w[1] - w[0];
        let len = seg.norm();
        if len < 1e-12 {
            continue;
        }
        let heading = seg.y.atan2(seg.x);
        let mut s = carry;
        while s < len {
            let p = w[0] + seg * (s / len);
            out.push(Pose2D::new(p.x, p.y, heading));
            s += step;
        }
        carry = s - len;
    }
    if out.is_empty() {
        out.push(Pose2D::new(waypoints[0].x, waypoints[0].y, 0.0));
    }
    out
}

/// Closed loop along the road centerlines enclosing the `(bx0..bx1) x (by0..by1)`
/// block range, counter-clockwise, starting at the lower-left corner.
pub fn loop_waypoints(params: &WorldParams, bx: (usize, usize), by: (usize, usize)) -> Vec<Vec2> {
    let (x0, x1) = (params.road_center(bx.0), params.road_center(bx.1));
    let (y0, y1) = (params.road_center(by.0), params.road_center(by.1));
    vec![
        Vec2::new(x0, y0),
        Vec2::new(x1, y0),
        Vec2::new(x1, y1),
        Vec2::new(x0, y1),
        Vec2::new(x0, y0),
    ]
}

/// Shifts every pose sideways (to its left) by `offset` meters.
pub fn lateral_offset(trajectory: &[Pose2D], offset: f64) -> Vec<Pose2D> {
    trajectory
        .iter()
        .map(|p| p.compose(&Pose2D::new(0.0, offset, 0.0)))
        .map(|p| Pose2D::new(p.x, p.y, p.theta))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quiet_lidar() -> LidarModel {
        LidarModel {
            range_noise: 0.0,
            ..LidarModel::default()
        }
    }

    #[test]
    fn world_is_deterministic() {
        let p = WorldParams::default();
        assert_eq!(generate_world(7, &p).unwrap(), generate_world(7, &p).unwrap());
        assert_ne!(generate_world(7, &p).unwrap(), generate_world(8, &p).unwrap());
    }

    #[test]
    fn roads_only_world() {
        let p = WorldParams {
            max_buildings_per_block: 0,
            ..WorldParams::default()
        };
        let w = generate_world(1, &p).unwrap();
        assert!(w.boxes.iter().all(|b| b.kind == BoxKind::Sidewalk));
        assert_eq!(w.building_clusters(), 0);
        assert_eq!(w.roads.len(), p.blocks_x + p.blocks_y + 2);
    }

    #[test]
    fn one_cluster_per_block() {
        for (bx, by) in [(1, 1), (2, 3), (4, 4)] {
            let p = WorldParams {
                blocks_x: bx,
                blocks_y: by,
                ..WorldParams::default()
            };
            let w = generate_world(3, &p).unwrap();
            assert_eq!(w.building_clusters(), bx * by);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let p = WorldParams {
            curb_height: 0.5,
            ..WorldParams::default()
        };
        assert!(matches!(generate_world(0, &p), Err(SimError::InvalidParams(_))));
    }

    #[test]
    fn wall_range_is_exact() {
        let wall = WorldBox::axis_aligned(Vec2::new(5.0, -20.0), Vec2::new(6.0, 20.0), 10.0, BoxKind::Building);
        let world = World::flat(30.0).with_box(wall);
        let lidar = quiet_lidar();
        let (cloud, labels) = simulate_scan_labeled(&world, &Pose2D::identity(), &lidar, 0).unwrap();
        let s = cloud.structure.as_ref().unwrap();
        let mut checked = 0;
        for (k, p) in cloud.points.iter().enumerate() {
            if labels[k] != HitLabel::Building {
                continue;
            }
            // beams straight ahead: azimuth closest to zero
            let az = lidar.azimuth(s.azimuth[k] as usize);
            let el = lidar.elevations[s.ring[k] as usize];
            let expected = 5.0 / (az.cos() * el.cos());
            let range = (p - Vec3::new(0.0, 0.0, lidar.mount_height)).norm();
            assert_abs_diff_eq!(range, expected, epsilon = 1e-6);
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn ground_ranges_follow_elevation() {
        let lidar = quiet_lidar();
        let (cloud, labels) =
            simulate_scan_labeled(&World::flat(100.0), &Pose2D::new(1.0, 2.0, 0.7), &lidar, 0).unwrap();
        let s = cloud.structure.as_ref().unwrap();
        assert!(labels.iter().all(|&l| l == HitLabel::Road));
        for (k, p) in cloud.points.iter().enumerate() {
            let el = lidar.elevations[s.ring[k] as usize];
            assert!(el < 0.0);
            let horiz = p.xy().norm();
            assert_abs_diff_eq!(horiz, lidar.mount_height / (-el).tan(), epsilon = 1e-6);
            assert_abs_diff_eq!(p.z, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn scans_are_rigidly_consistent() {
        let w = generate_world(5, &WorldParams::default()).unwrap();
        let lidar = quiet_lidar();
        let p = Pose2D::new(74.0, 30.0, 1.2);
        let delta = Pose2D::new(0.0, 0.0, 2.0 * PI / lidar.azimuth_bins as f64 * 3.0);
        let a = simulate_scan(&w, &p, &lidar, 1).unwrap();
        let b = simulate_scan(&w, &p.compose(&delta), &lidar, 2).unwrap();
        // rotation by exactly three azimuth bins: beam (r, a) of b equals beam (r, a + 3) of a
        let sa = a.structure.as_ref().unwrap();
        let sb = b.structure.as_ref().unwrap();
        let mut lookup = std::collections::HashMap::new();
        for k in 0..a.len() {
            lookup.insert((sa.ring[k], sa.azimuth[k]), a.points[k]);
        }
        let mut n = 0;
        for k in 0..b.len() {
            let key = (sb.ring[k], ((sb.azimuth[k] as usize + 3) % lidar.azimuth_bins) as u16);
            if let Some(pa) = lookup.get(&key) {
                let pb = delta.apply(&b.points[k].xy());
                assert!((pb - pa.xy()).norm() < 1e-6 && (b.points[k].z - pa.z).abs() < 1e-6);
                n += 1;
            }
        }
        assert!(n > a.len() * 9 / 10);
    }

    #[test]
    fn noiseless_odometry_reproduces_trajectory() {
        let traj = trajectory_from_waypoints(&[Vec2::new(0.0, 0.0), Vec2::new(30.0, 0.0), Vec2::new(30.0, 20.0)], 0.7);
        let odo = noisy_odometry(&traj, &OdometryNoise::none(), 3);
        let mut cur = traj[0];
        for t in 1..traj.len() {
            cur = cur.compose(&odo[t]);
            assert_abs_diff_eq!(cur.x, traj[t].x, epsilon = 1e-9);
            assert_abs_diff_eq!(cur.y, traj[t].y, epsilon = 1e-9);
        }
    }

    #[test]
    fn dead_reckoning_drifts_with_additive_noise() {
        let traj: Vec<Pose2D> = (0..=1000).map(|k| Pose2D::new(0.5 * k as f64, 0.0, 0.0)).collect();
        let noise = OdometryNoise {
            scale_sigma: 0.0,
            trans_sigma: 0.02,
            rot_sigma: 0.0,
        };
        let mut end_err: Vec<f64> = (0..50)
            .map(|seed| {
                let odo = noisy_odometry(&traj, &noise, seed);
                let end = odo[1..].iter().fold(traj[0], |p, o| p.compose(o));
                (end.translation() - traj[1000].translation()).norm()
            })
            .collect();
        end_err.sort_by(|a, b| a.total_cmp(b));
        // 2D random walk: |e| is Rayleigh with sigma 0.02 * sqrt(1000), median ~0.74 m
        assert!(end_err[25] >= 0.5, "median {}", end_err[25]);
    }

    #[test]
    fn same_seed_gives_identical_runs() {
        let world = generate_world(2, &WorldParams::default()).unwrap();
        let traj: Vec<Pose2D> = (0..3).map(|k| Pose2D::new(20.0 + k as f64, 7.0, 0.0)).collect();
        let run = |s| simulate_run(&world, &traj, &LidarModel::default(), &OdometryNoise::default(), 0.1, s).unwrap();
        assert_eq!(run(4), run(4));
        assert_ne!(run(4).odometry, run(5).odometry);
    }

    #[test]
    fn out_of_bounds_rejected() {
        let w = World::flat(10.0);
        assert!(matches!(
            simulate_scan(&w, &Pose2D::new(50.0, 0.0, 0.0), &LidarModel::default(), 0),
            Err(SimError::OutOfBounds(..))
        ));
    }

    #[test]
    fn waypoints_are_densified() {
        let t = trajectory_from_waypoints(&[Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0)], 2.5);
        assert_eq!(t.len(), 4);
        assert_abs_diff_eq!(t[3].x, 7.5, epsilon = 1e-12);
    }
}
