//! Topological-map LiDAR localization.
//!
//! A map is a graph of locations built from a ground-truth run; each location
//! keeps a classified bird's-eye grid, wall/curb distance maps, corner features
//! and a place descriptor. Later runs are tracked through the graph with a
//! four-branch state machine backed by a feature + distance-map Gauss-Newton
//! scan matcher and place-recognition retrieval.
//!
//! Runnable walkthroughs live in `examples/`:
//!
//! ```bash
//! cargo run --release -p topoloc --example simulate_world
//! cargo run --release -p topoloc --example end_to_end
//! ```

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod curb;
pub mod dataset;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod grid;
pub mod localizer;
pub mod place_recognition;
pub mod scan_matcher;
pub mod sim;
pub mod topo_map;

pub use geometry::{CellClass, DistanceMap, OccupancyGrid, PointCloud, Pose2D, Vec2, Vec3};
