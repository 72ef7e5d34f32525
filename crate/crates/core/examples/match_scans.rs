//! Matching two scans of the same place, with and without an initial guess,
//! and rejecting a pair from different streets.

use std::time::Instant;

use topoloc::grid::{process_scan, ScanPipelineConfig};
use topoloc::scan_matcher::{try_match, MatcherConfig};
use topoloc::sim::{generate_world, simulate_scan, LidarModel, WorldParams};
use topoloc::Pose2D;

fn main() {
    let world = generate_world(7, &WorldParams::default()).unwrap();
    let (pipe, mcfg, lidar) = (
        ScanPipelineConfig::default(),
        MatcherConfig::default(),
        LidarModel::default(),
    );
    let scan = |p: &Pose2D, seed| process_scan(&simulate_scan(&world, p, &lidar, seed).unwrap(), &pipe).unwrap();

    let loc = Pose2D::new(110.0, 74.0, 0.0);
    let truth = Pose2D::new(2.0, 1.0, 0.3);
    let cand = scan(&loc, 1);
    let reference = scan(&loc.compose(&truth), 2);

    for (name, guess) in [("no guess", None), ("guess", Some(Pose2D::new(1.5, 0.5, 0.25)))] {
        let t0 = Instant::now();
        let r = try_match(&reference, &cand, guess.as_ref(), &mcfg, &pipe.features);
        let (et, er) = r.x.error_to(&truth);
        println!(
            "{name:>8}: success {} iou {:.2} inliers {}/{} fallback {} | error {:.3} m {:.2} deg | {:.1} ms",
            r.success,
            r.iou,
            r.inliers,
            r.pairs,
            r.fallback,
            et,
            er.to_degrees(),
            t0.elapsed().as_secs_f64() * 1e3
        );
    }

    let far = scan(&Pose2D::new(250.0, 148.0, 1.0), 3);
    let r = try_match(&far, &cand, None, &mcfg, &pipe.features);
    println!("different street: success {} iou {:.2}", r.success, r.iou);
}
