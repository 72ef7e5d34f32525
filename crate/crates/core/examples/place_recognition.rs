//! Retrieval quality of the polar spectrum descriptor: a map of one block's
//! loop, queried with scans taken 1 m to the side and rotated.

use topoloc::grid::ScanPipelineConfig;
use topoloc::place_recognition::{retrieve_top_k, PlaceEncoder, PolarEncoderConfig, PolarSpectrumEncoder};
use topoloc::sim::{
    generate_world, lateral_offset, loop_waypoints, simulate_run, simulate_scan, trajectory_from_waypoints, LidarModel,
    OdometryNoise, WorldParams,
};
use topoloc::topo_map::{build_map, MapConfig};
use topoloc::Pose2D;

fn main() {
    let params = WorldParams::default();
    let world = generate_world(7, &params).unwrap();
    let lidar = LidarModel::default();
    let pipe = ScanPipelineConfig::default();
    let enc = PolarSpectrumEncoder::new(PolarEncoderConfig::default()).unwrap();

    let traj = trajectory_from_waypoints(&loop_waypoints(&params, (1, 2), (1, 2)), 1.0);
    let run = simulate_run(&world, &traj, &lidar, &OdometryNoise::none(), 0.1, 1).unwrap();
    let map = build_map(&run.frames, &run.gt_poses, &MapConfig::default(), &pipe, &enc).unwrap();
    println!("map: {} locations, descriptor dim {}", map.len(), map.descriptor_dim());

    let (mut top1, mut top5, mut n) = (0, 0, 0);
    for (k, p) in lateral_offset(&traj, 1.0).iter().enumerate().step_by(7) {
        let q = p.compose(&Pose2D::new(0.0, 0.0, 0.4 * ((k % 5) as f64 - 2.0)));
        let cloud = simulate_scan(&world, &q, &lidar, 100 + k as u64).unwrap();
        let rec = topoloc::grid::process_scan(&cloud, &pipe).unwrap();
        let Ok(d) = enc.encode(&rec, None) else { continue };
        let near = |v: usize| map.locations[v].pose.translation().metric_distance(&q.translation()) < 10.0;
        let hits = retrieve_top_k(&d, &map, 5);
        n += 1;
        top1 += near(hits[0].0) as usize;
        top5 += hits.iter().any(|&(v, _)| near(v)) as usize;
    }
    println!("queries {n}: top-1 within 10 m {top1}, top-5 {top5}");
}
