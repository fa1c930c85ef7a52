//! Builds a synthetic world, drives a short traversal through it and writes
//! the scans in the on-disk traversal format.
//!
//! cargo run --release --example synthetic_scans -- /tmp/egonn_scans

use egonn::data::{generate_traversal, generate_world, CloudLayout, ScanSpec, Traversal, TrajectorySpec, WorldSpec};

fn main() -> egonn::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("egonn_scans"));
    let world = generate_world(&WorldSpec::default())?;
    println!("road loop {:.1} m", world.road.length());
    let traj = TrajectorySpec {
        count: 5,
        spacing: 3.0,
        perturb_yaw_deg: 10.0,
        ..TrajectorySpec::default()
    };
    let scans = generate_traversal(&world, &traj, &ScanSpec::toy())?;
    for s in &scans {
        let t = s.pose.translation;
        println!("t={:5.2}s  ({:7.2}, {:7.2})  {} points", s.timestamp, t.x, t.y, s.cloud.len());
    }
    let trav = Traversal::write(&out, &scans, CloudLayout::Xyz)?;
    println!("wrote {} scans to {}", trav.len(), out.display());
    Ok(())
}
