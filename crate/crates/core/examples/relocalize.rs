//! Two-stage relocalization on a small synthetic map: top-1 retrieval by
//! global descriptor, then keypoint RANSAC against the retrieved scan.
//! Pass a trained checkpoint for meaningful numbers.
//!
//! cargo run --release --example relocalize -- [model.ckpt]

use egonn::data::{generate_traversal, generate_world, ScanSpec, TrajectorySpec, WorldSpec};
use egonn::model::{Branches, EgoNN, NetConfig};
use egonn::pipeline::{evaluate_pose, localize, LocalizeOptions, Selection};
use egonn::registration::RansacConfig;
use egonn::retrieval::DescriptorDB;

fn main() -> egonn::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => EgoNN::load(NetConfig::toy(), std::path::Path::new(&path))?,
        None => EgoNN::new(NetConfig::toy(), 0)?,
    };
    let world = generate_world(&WorldSpec::default())?;
    let scan = ScanSpec::toy();
    let map = generate_traversal(&world, &TrajectorySpec { count: 40, spacing: 0.0, ..TrajectorySpec::default() }, &scan)?;
    let queries = generate_traversal(
        &world,
        &TrajectorySpec { count: 10, spacing: 0.0, start: 1.3, perturb_lateral: 1.0, perturb_yaw_deg: 10.0, seed: 9, ..TrajectorySpec::default() },
        &scan,
    )?;

    let mut db = DescriptorDB::new();
    let mut map_keypoints = Vec::new();
    for (i, s) in map.iter().enumerate() {
        let f = model.extract_one(&s.cloud, Branches::Both)?;
        db.add(i as u64, &f.global.expect("requested").vec, &s.pose, "")?;
        map_keypoints.push(f.keypoints.expect("requested"));
    }
    let mut q = Vec::new();
    for s in &queries {
        let f = model.extract_one(&s.cloud, Branches::Both)?;
        q.push((f.global.expect("requested").vec, f.keypoints.expect("requested")));
    }
    let opts = LocalizeOptions { keypoints: 128, selection: Selection::Salient, mutual: false, ransac: RansacConfig::default() };
    let locs = localize(&db, &q, |id| Ok(map_keypoints[id as usize].clone()), &opts)?;
    for l in &locs {
        let t = l.pose.translation;
        println!("query {} -> map {} ({} inliers) at ({:.2}, {:.2})", l.query, l.top1, l.inliers, t.x, t.y);
    }
    let gt: Vec<_> = queries.iter().map(|s| s.pose.clone()).collect();
    print!("{}", evaluate_pose(&locs, &gt, &db, 5.0)?.to_csv());
    Ok(())
}
