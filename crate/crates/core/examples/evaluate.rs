//! Trajectory metrics: a three-step worked example, then dead reckoning
//! against ground truth on a simulated loop (odometry only, no scans).

use topoloc::evaluation::{evaluate, TrajectoryPair};
use topoloc::sim::{loop_waypoints, noisy_odometry, trajectory_from_waypoints, OdometryNoise, WorldParams};
use topoloc::Pose2D;

fn main() {
    let gt = vec![
        Pose2D::new(0.0, 0.0, 0.0),
        Pose2D::new(1.0, 0.0, 0.0),
        Pose2D::new(2.0, 0.0, 0.0),
    ];
    let est = vec![
        Pose2D::new(2.0, 0.0, 0.0),
        Pose2D::new(1.0, 20.0, 0.0),
        Pose2D::new(2.0, 4.0, 0.3),
    ];
    let tp = TrajectoryPair::new(vec![0.0, 0.1, 0.2], est, gt).unwrap();
    let (m, errors) = evaluate(&tp, 10.0).unwrap();
    println!("errors {errors:?}");
    print!("{}", m.table("worked example"));

    let traj = trajectory_from_waypoints(&loop_waypoints(&WorldParams::default(), (1, 3), (1, 3)), 1.0);
    let odo = noisy_odometry(&traj, &OdometryNoise::default(), 3);
    let mut dr = vec![traj[0]];
    for o in &odo[1..] {
        dr.push(dr.last().unwrap().compose(o));
    }
    let ts = (0..traj.len()).map(|t| t as f64 * 0.1).collect();
    let (m, _) = evaluate(&TrajectoryPair::new(ts, dr, traj).unwrap(), 10.0).unwrap();
    print!("{}", m.table("dead reckoning"));
}
