//! Quantizes a scan onto the cylindrical grid and shows that a yaw of whole
//! azimuth bins only shifts the θ index.

use egonn::data::{generate_traversal, generate_world, ScanSpec, TrajectorySpec, WorldSpec};
use egonn::geometry::{quantize, PoseSE3, QuantizationSpec};
use nalgebra::Vector3;

fn main() -> egonn::Result<()> {
    let world = generate_world(&WorldSpec::default())?;
    let traj = TrajectorySpec { count: 1, ..TrajectorySpec::default() };
    let scan = generate_traversal(&world, &traj, &ScanSpec::toy())?.remove(0);
    let q = QuantizationSpec::toy();
    let voxels = quantize(&scan.cloud, &q);
    println!("{} points -> {} occupied voxels ({} azimuth bins)", scan.cloud.len(), voxels.len(), q.theta_bins());

    let k = 32;
    let turned = PoseSE3::from_yaw(k as f64 * q.theta_step(), Vector3::zeros()).apply(&scan.cloud);
    let shifted = quantize(&turned, &q);
    let bins = q.theta_bins() as i32;
    let mut expected: Vec<_> = voxels
        .iter()
        .map(|v| egonn::geometry::VoxelCoord::new(0, v.i_rho, (v.i_theta + k).rem_euclid(bins), v.i_z))
        .collect();
    expected.sort_unstable();
    let same = expected.iter().zip(&shifted).filter(|(a, b)| a == b).count();
    println!("after a {:.1}° yaw, {same}/{} voxels are exact θ shifts", k as f64 * q.theta_step_deg, voxels.len());
    Ok(())
}
