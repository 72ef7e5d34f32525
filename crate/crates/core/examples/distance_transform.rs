//! Distance maps of a small hand-drawn grid, printed as text.

use topoloc::geometry::{distance_transform, CellClass, OccupancyGrid};
use topoloc::{Pose2D, Vec2};

fn main() {
    let mut g = OccupancyGrid::new(0.5, 16, 8, Pose2D::identity());
    for i in 2..14 {
        g.set(i, 6, CellClass::Wall);
    }
    g.set(4, 1, CellClass::Curb);
    g.set(11, 1, CellClass::Curb);

    let walls = distance_transform(&g, CellClass::Wall, 2.0).expect("grid has walls");
    println!("wall distance (m), truncated at 2 m:");
    for j in (0..g.height).rev() {
        let row: Vec<String> = (0..g.width).map(|i| format!("{:3.1}", walls.d(i, j))).collect();
        println!("  {}", row.join(" "));
    }

    let p = Vec2::new(3.3, 1.8);
    let (d, grad) = walls.sample(&p).expect("inside the grid");
    println!(
        "bilinear sample at ({}, {}): d = {d:.3} m, gradient = ({:.3}, {:.3})",
        p.x, p.y, grad.x, grad.y
    );

    match distance_transform(&OccupancyGrid::new(0.5, 4, 4, Pose2D::identity()), CellClass::Wall, 2.0) {
        Err(e) => println!("empty grid: {e}"),
        Ok(_) => unreachable!(),
    }
}
