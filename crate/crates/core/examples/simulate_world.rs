//! Generates the default city, drives a loop around four blocks and writes the
//! run to disk in the dataset layout the CLI reads.
//!
//! `cargo run --release --example simulate_world -- /tmp/run`

use std::path::PathBuf;

use topoloc::dataset::{load_run_poses, save_run};
use topoloc::sim::{
    generate_world, loop_waypoints, simulate_run, trajectory_from_waypoints, LidarModel, OdometryNoise, WorldParams,
};

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("topoloc_run"));
    let params = WorldParams::default();
    let world = generate_world(7, &params).unwrap();
    println!(
        "world: {} boxes, {} building clusters, {} roads",
        world.boxes.len(),
        world.building_clusters(),
        world.roads.len()
    );

    let traj = trajectory_from_waypoints(&loop_waypoints(&params, (1, 3), (1, 3)), 1.0);
    let run = simulate_run(&world, &traj, &LidarModel::default(), &OdometryNoise::default(), 0.1, 1).unwrap();
    let pts: usize = run.frames.iter().map(|f| f.len()).sum();
    println!(
        "{} frames, {:.0} points per frame on average",
        run.len(),
        pts as f64 / run.len() as f64
    );

    let dr = run.dead_reckoning();
    let drift = dr.last().unwrap().error_to(run.gt_poses.last().unwrap()).0;
    println!("dead-reckoning drift after the loop: {drift:.2} m");

    save_run(&run, &out).unwrap();
    let back = load_run_poses(&out).unwrap();
    println!(
        "wrote {} ({} poses, last t = {:.1} s)",
        out.display(),
        back.gt_poses.len(),
        back.timestamps.last().unwrap()
    );
}
