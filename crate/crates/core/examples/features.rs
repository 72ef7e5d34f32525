//! Corner features on two bird's-eye grids of the same street, matched and
//! turned into an initial transform by consensus + Procrustes.

use topoloc::features::{estimate_initial_transform, match_features, FeatureKind};
use topoloc::grid::{process_scan, ScanPipelineConfig};
use topoloc::sim::{generate_world, simulate_scan, LidarModel, WorldParams};
use topoloc::Pose2D;

fn main() {
    let world = generate_world(7, &WorldParams::default()).expect("default world");
    let cfg = ScanPipelineConfig::default();
    let lidar = LidarModel::default();
    let here = Pose2D::new(110.0, 74.0, 0.0);
    let offset = Pose2D::new(1.5, -0.8, 0.2);
    let cand = process_scan(&simulate_scan(&world, &here, &lidar, 1).unwrap(), &cfg).unwrap();
    let reference = process_scan(&simulate_scan(&world, &here.compose(&offset), &lidar, 2).unwrap(), &cfg).unwrap();

    let (rf, cf) = (
        reference.features.get(FeatureKind::OrientedBinary),
        cand.features.get(FeatureKind::OrientedBinary),
    );
    println!("features: reference {}, candidate {}", rf.len(), cf.len());
    let matches = match_features(rf, cf, &cfg.features);
    println!("ratio-test matches: {}", matches.len());

    let pairs: Vec<_> = matches
        .iter()
        .map(|m| {
            (
                reference.grid.grid_to_scan(&rf[m.ref_idx].pos()),
                cand.grid.grid_to_scan(&cf[m.cand_idx].pos()),
            )
        })
        .collect();
    let f = &cfg.features;
    match estimate_initial_transform(
        &pairs,
        f.inlier_tol_cells * cfg.grid.resolution,
        f.min_inliers,
        f.ransac_iters,
        f.seed,
    ) {
        Ok(est) => {
            let (et, er) = est.pose.error_to(&offset);
            println!("initial estimate {:?} from {} inliers", est.pose, est.inliers.len());
            println!("error vs planted offset: {et:.3} m, {:.2} deg", er.to_degrees());
        }
        Err(e) => println!("no consensus: {e}"),
    }
}
