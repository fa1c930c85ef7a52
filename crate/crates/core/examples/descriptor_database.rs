//! Stores global descriptors with poses, saves and reloads the database,
//! and evaluates Recall@N for noisy copies of the stored descriptors.

use egonn::geometry::PoseSE3;
use egonn::retrieval::{chance_recall_at_1, evaluate_recall, DescriptorDB, DB_DESCRIPTOR_DIM};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn main() -> egonn::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut db = DescriptorDB::new();
    let mut descs = Vec::new();
    for i in 0..100u64 {
        let d = unit((0..DB_DESCRIPTOR_DIM).map(|_| rng.random_range(-1.0..1.0)).collect());
        let pose = PoseSE3::from_yaw(0.0, Vector3::new(10.0 * i as f64, 0.0, 0.0));
        db.add(i, &d, &pose, &format!("clouds/{i:06}.bin"))?;
        descs.push((d, pose));
    }
    let path = std::env::temp_dir().join("egonn_example.db");
    db.save(&path)?;
    let db = DescriptorDB::load(&path)?;
    println!("{} entries, {} bytes on disk", db.len(), std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));

    let queries: Vec<(Vec<f64>, PoseSE3)> = descs
        .iter()
        .map(|(d, p)| (unit(d.iter().map(|x| x + rng.random_range(-0.1..0.1)).collect()), p.clone()))
        .collect();
    let top = db.query_topk(&queries[0].0, 3);
    println!("top-3 for query 0: {top:?}");
    let report = evaluate_recall(&db, &queries, &[1, 5], &[5.0])?;
    print!("{}", report.to_csv());
    let positions: Vec<[f64; 3]> = descs.iter().map(|(_, p)| p.translation.into()).collect();
    println!("random-descriptor Recall@1: {:.3}", chance_recall_at_1(&positions, &positions, 5.0));
    Ok(())
}
