//! Curb extraction on a straight street with 15 cm curbs: how many detections
//! land on a real curb line, and what comes out of a world with no curbs.

use topoloc::curb::{detect_curbs, CurbParams};
use topoloc::sim::{simulate_scan, LidarModel, World};
use topoloc::{Pose2D, Vec2};

fn main() {
    let street = World::street(7.0, 200.0, 0.15);
    let lidar = LidarModel::default();
    let params = CurbParams::default();

    for (k, y) in [-3.0, 0.0, 2.5].into_iter().enumerate() {
        let pose = Pose2D::new(100.0, y, 0.1 * k as f64);
        let cloud = simulate_scan(&street, &pose, &lidar, k as u64).unwrap();
        let det = detect_curbs(&cloud, &params).expect("ground visible");
        let on_curb = det
            .points
            .iter()
            .filter(|p| street.curb_distance(&pose.apply(&Vec2::new(p.x, p.y))) < 0.2)
            .count();
        println!(
            "pose ({:.1}, {:.1}, {:.2}): {} curb points, {} within 0.2 m of a curb line, ground normal ({:.3}, {:.3}, {:.3})",
            pose.x,
            pose.y,
            pose.theta,
            det.points.len(),
            on_curb,
            det.plane.normal.x,
            det.plane.normal.y,
            det.plane.normal.z
        );
    }

    let flat = World::flat(100.0);
    let cloud = simulate_scan(&flat, &Pose2D::identity(), &lidar, 0).unwrap();
    let det = detect_curbs(&cloud, &params).unwrap();
    println!("flat ground: {} curb points", det.points.len());
}
