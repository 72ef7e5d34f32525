//! Full pipeline: map a loop with a noiseless run, then localize a second run
//! driven 1 m to the side with noisy odometry, starting from global
//! localization, and report ATE and success rate against dead reckoning.

use std::time::Instant;

use topoloc::evaluation::{evaluate, TrajectoryPair};
use topoloc::grid::ScanPipelineConfig;
use topoloc::localizer::{localize_run, InitMode, Localizer, LocalizerConfig};
use topoloc::place_recognition::{PolarEncoderConfig, PolarSpectrumEncoder};
use topoloc::scan_matcher::MatcherConfig;
use topoloc::sim::{
    generate_world, lateral_offset, loop_waypoints, simulate_run, trajectory_from_waypoints, LidarModel, OdometryNoise,
    WorldParams,
};
use topoloc::topo_map::{build_map, MapConfig};

fn main() {
    let params = WorldParams::default();
    let world = generate_world(7, &params).unwrap();
    let lidar = LidarModel::default();
    let traj = trajectory_from_waypoints(&loop_waypoints(&params, (1, 3), (1, 3)), 1.0);

    let t0 = Instant::now();
    let mapping = simulate_run(&world, &traj, &lidar, &OdometryNoise::none(), 0.1, 1).unwrap();
    let enc = PolarSpectrumEncoder::new(PolarEncoderConfig::default()).unwrap();
    let map = build_map(
        &mapping.frames,
        &mapping.gt_poses,
        &MapConfig::default(),
        &ScanPipelineConfig::default(),
        &enc,
    )
    .unwrap();
    println!(
        "map: {} locations from {} frames ({:.1} s)",
        map.len(),
        mapping.len(),
        t0.elapsed().as_secs_f64()
    );

    let run = simulate_run(
        &world,
        &lateral_offset(&traj, 1.0),
        &lidar,
        &OdometryNoise::default(),
        0.1,
        2,
    )
    .unwrap();
    let t0 = Instant::now();
    let mut loc = Localizer::new(&map, &enc, LocalizerConfig::default(), MatcherConfig::default()).unwrap();
    let reports = localize_run(&mut loc, &run.frames, &run.odometry, InitMode::Global).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "localized {} frames in {:.1} s ({:.0} ms/frame)",
        run.len(),
        secs,
        1e3 * secs / run.len() as f64
    );
    println!("branches: {:?}", loc.stats());

    let est = reports.iter().map(|r| r.global_pose).collect();
    let (m, _) = evaluate(
        &TrajectoryPair::new(run.timestamps.clone(), est, run.gt_poses.clone()).unwrap(),
        10.0,
    )
    .unwrap();
    print!("{}", m.table("topological"));
    let dr = TrajectoryPair::new(run.timestamps.clone(), run.dead_reckoning(), run.gt_poses.clone()).unwrap();
    print!("{}", evaluate(&dr, 10.0).unwrap().0.table("dead reckoning"));
}
