//! Builds a topological map from a noiseless mapping run, saves it and loads
//! it back.
//!
//! `cargo run --release --example build_map -- /tmp/map`

use std::path::PathBuf;

use topoloc::grid::ScanPipelineConfig;
use topoloc::place_recognition::{PolarEncoderConfig, PolarSpectrumEncoder};
use topoloc::sim::{
    generate_world, loop_waypoints, simulate_run, trajectory_from_waypoints, LidarModel, OdometryNoise, WorldParams,
};
use topoloc::topo_map::{build_map, load_map, location_to_bytes, map_size_on_disk, save_map, MapConfig};

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("topoloc_map"));
    let params = WorldParams::default();
    let world = generate_world(7, &params).unwrap();
    let traj = trajectory_from_waypoints(&loop_waypoints(&params, (1, 3), (1, 2)), 1.0);
    let run = simulate_run(&world, &traj, &LidarModel::default(), &OdometryNoise::none(), 0.1, 1).unwrap();

    let enc = PolarSpectrumEncoder::new(PolarEncoderConfig::default()).unwrap();
    let map = build_map(
        &run.frames,
        &run.gt_poses,
        &MapConfig::default(),
        &ScanPipelineConfig::default(),
        &enc,
    )
    .unwrap();
    let degree: Vec<usize> = (0..map.len()).map(|v| map.neighbors(v).unwrap().len()).collect();
    println!(
        "{} frames -> {} locations, {} edges, degree {}..{}",
        run.len(),
        map.len(),
        map.edges.len(),
        degree.iter().min().unwrap(),
        degree.iter().max().unwrap()
    );

    let largest = map.locations.iter().map(|l| location_to_bytes(l).len()).max().unwrap();
    save_map(&map, &out).unwrap();
    println!(
        "saved to {}: {} bytes on disk, largest location {} bytes",
        out.display(),
        map_size_on_disk(&out).unwrap(),
        largest
    );
    let back = load_map(&out).unwrap();
    println!("reloaded map identical: {}", back == map);
}
