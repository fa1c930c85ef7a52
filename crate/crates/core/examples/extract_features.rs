//! Runs the toy network on one synthetic scan and prints its global
//! descriptor and most salient keypoints. Pass a checkpoint to use trained
//! weights; otherwise the weights are freshly initialized.
//!
//! cargo run --release --example extract_features -- [model.ckpt]

use egonn::data::{generate_traversal, generate_world, ScanSpec, TrajectorySpec, WorldSpec};
use egonn::model::{select_keypoints, Branches, EgoNN, NetConfig};

fn main() -> egonn::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => EgoNN::load(NetConfig::toy(), std::path::Path::new(&path))?,
        None => EgoNN::new(NetConfig::toy(), 0)?,
    };
    let world = generate_world(&WorldSpec::default())?;
    let traj = TrajectorySpec { count: 1, ..TrajectorySpec::default() };
    let scan = generate_traversal(&world, &traj, &ScanSpec::toy())?.remove(0);

    let out = model.extract_one(&scan.cloud, Branches::Both)?;
    let g = out.global.expect("global branch requested");
    let norm = g.vec.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("global descriptor: {} values, norm {norm:.3}, first {:?}", g.vec.len(), &g.vec[..4]);

    let ks = out.keypoints.expect("local branch requested");
    println!("{} keypoints with {}-d descriptors", ks.len(), ks.descriptors.ncols());
    let top = select_keypoints(&ks, 5);
    for (p, s) in top.positions.iter().zip(&top.saliency) {
        println!("  ({:7.2}, {:7.2}, {:5.2})  uncertainty {s:.4}", p.x, p.y, p.z);
    }
    Ok(())
}
