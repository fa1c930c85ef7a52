//! Recovers a rigid transform from correspondences with 40% outliers, and
//! compares with point-to-point ICP started from identity.

use egonn::geometry::{PointCloud, PoseSE3};
use egonn::registration::{icp_p2p, pose_errors, ransac_register, Match, MatchSet, RansacConfig};
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let gt = PoseSE3::from_yaw(120f64.to_radians(), Vector3::new(4.0, -3.0, 0.2));
    let a: Vec<Point3<f64>> = (0..200)
        .map(|_| Point3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(0.0..3.0)))
        .collect();
    let mut b: Vec<Point3<f64>> = a.iter().map(|p| gt.apply_point(p)).collect();
    for p in b.iter_mut().take(80) {
        *p = Point3::new(rng.random_range(-25.0..25.0), rng.random_range(-25.0..25.0), rng.random_range(0.0..3.0));
    }
    let matches = MatchSet {
        pairs: (0..a.len()).map(|i| Match { a: i, b: i, score: 1.0 }).collect(),
    };
    let out = ransac_register(&matches, &a, &b, &RansacConfig::default());
    let e = pose_errors(&out.pose, &gt);
    println!(
        "RANSAC: {} inliers after {} iterations, RTE {:.2e} m, RRE {:.2e}°",
        out.inliers.len(),
        out.iterations,
        e.rte,
        e.rre
    );

    let source = PointCloud::new(a.clone());
    let target = PointCloud::new(a.iter().map(|p| gt.apply_point(p)).collect());
    let icp = icp_p2p(&source, &target, &PoseSE3::identity(), 50, 1e-9);
    let e = pose_errors(&icp.pose, &gt);
    println!("ICP from identity: RTE {:.2} m, RRE {:.1}° (success {})", e.rte, e.rre, e.success);
}
