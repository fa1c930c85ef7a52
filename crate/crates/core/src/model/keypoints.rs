//! Keypoint decoding, saliency-based selection and repeatability.

use nalgebra::Point3;

use crate::geometry::{cart_to_cyl, cyl_to_cart, CylPoint, PoseSE3, QuantizationSpec};
use crate::sparse_ad::{Mat, NodeId, Tape};

/// Regressed offsets are clamped to `±(1 - RAW_MARGIN)` before decoding so a
/// saturated tanh still lands strictly inside its supervoxel.
pub const RAW_MARGIN: f64 = 1e-9;

/// Extent of one supervoxel (the stride-8 cell of the local feature map).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervoxelGrid {
    pub s_rho: f64,
    /// Radians.
    pub s_theta: f64,
    pub s_z: f64,
}

impl SupervoxelGrid {
    /// Cell of the given per-axis stride on the base grid.
    pub fn from_stride(q: &QuantizationSpec, stride: [u32; 3]) -> Self {
        Self {
            s_rho: q.rho_step * stride[0] as f64,
            s_theta: q.theta_step() * stride[1] as f64,
            s_z: q.z_step * stride[2] as f64,
        }
    }

    pub fn extents(&self) -> [f64; 3] {
        [self.s_rho, self.s_theta, self.s_z]
    }

    /// Center of the cell with level indices `(i_rho, i_theta, i_z)`.
    pub fn center(&self, idx: [i32; 3]) -> CylPoint {
        CylPoint {
            rho: (idx[0] as f64 + 0.5) * self.s_rho,
            theta: (idx[1] as f64 + 0.5) * self.s_theta,
            z: (idx[2] as f64 + 0.5) * self.s_z,
        }
    }
}

fn clamp_raw(v: f64) -> f64 {
    v.clamp(-1.0 + RAW_MARGIN, 1.0 - RAW_MARGIN)
}

/// Absolute cylindrical coordinates of a keypoint: `c + raw · s / 2` per axis.
pub fn decode_cylindrical(raw: [f64; 3], grid: &SupervoxelGrid, center: &CylPoint) -> CylPoint {
    CylPoint {
        rho: clamp_raw(raw[0]) * grid.s_rho / 2.0 + center.rho,
        theta: clamp_raw(raw[1]) * grid.s_theta / 2.0 + center.theta,
        z: clamp_raw(raw[2]) * grid.s_z / 2.0 + center.z,
    }
}

/// Cartesian keypoint positions from regressed offsets in `(-1, 1)³`.
pub fn decode_keypoints(raw: &[[f64; 3]], grid: &SupervoxelGrid, centers: &[CylPoint]) -> Vec<Point3<f64>> {
    raw.iter()
        .zip(centers)
        .map(|(r, c)| cyl_to_cart(&decode_cylindrical(*r, grid, c)))
        .collect()
}

/// Tape version of [`decode_keypoints`] over an `M × 3` node of offsets.
pub fn decode_keypoints_op(tape: &mut Tape, raw: NodeId, grid: SupervoxelGrid, centers: Vec<CylPoint>) -> NodeId {
    let rv = tape.value(raw);
    assert_eq!(rv.nrows(), centers.len());
    let mut out = Mat::zeros((rv.nrows(), 3));
    let mut cyl = Vec::with_capacity(rv.nrows());
    for (i, c) in centers.iter().enumerate() {
        let d = decode_cylindrical([rv[[i, 0]], rv[[i, 1]], rv[[i, 2]]], &grid, c);
        let p = cyl_to_cart(&d);
        out[[i, 0]] = p.x;
        out[[i, 1]] = p.y;
        out[[i, 2]] = p.z;
        cyl.push(d);
    }
    tape.op(
        out,
        vec![raw],
        Box::new(move |g, p, _| {
            let rv = p[0];
            let mut gr = Mat::zeros(rv.dim());
            for (i, d) in cyl.iter().enumerate() {
                let inside = |k: usize| rv[[i, k]].abs() < 1.0 - RAW_MARGIN;
                let (s, c) = d.theta.sin_cos();
                // x = rho cos theta, y = rho sin theta
                let d_rho = g[[i, 0]] * c + g[[i, 1]] * s;
                let d_theta = d.rho * (-g[[i, 0]] * s + g[[i, 1]] * c);
                if inside(0) {
                    gr[[i, 0]] = d_rho * grid.s_rho / 2.0;
                }
                if inside(1) {
                    gr[[i, 1]] = d_theta * grid.s_theta / 2.0;
                }
                if inside(2) {
                    gr[[i, 2]] = g[[i, 2]] * grid.s_z / 2.0;
                }
            }
            vec![Some(gr)]
        }),
    )
}

/// Keypoints of one cloud: one per non-empty supervoxel.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    /// Cartesian positions, sensor frame.
    pub positions: Vec<Point3<f64>>,
    /// Regressed offsets in `(-1, 1)³`.
    pub raw: Vec<[f64; 3]>,
    /// Saliency uncertainty; lower is more reliable.
    pub saliency: Vec<f64>,
    /// Unit-norm local descriptors, one row per keypoint.
    pub descriptors: Mat,
    pub supervoxel_centers: Vec<CylPoint>,
    /// Row of the supervoxel in the local feature map.
    pub supervoxel_index: Vec<usize>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> KeypointSet {
        KeypointSet {
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
            raw: rows.iter().map(|&r| self.raw[r]).collect(),
            saliency: rows.iter().map(|&r| self.saliency[r]).collect(),
            descriptors: crate::sparse_ad::take_rows(self.descriptors.view(), rows),
            supervoxel_centers: rows.iter().map(|&r| self.supervoxel_centers[r]).collect(),
            supervoxel_index: rows.iter().map(|&r| self.supervoxel_index[r]).collect(),
        }
    }

    /// Keypoints placed at their supervoxel centers (position regression off).
    pub fn at_centers(&self) -> KeypointSet {
        let mut out = self.clone();
        out.positions = self.supervoxel_centers.iter().map(cyl_to_cart).collect();
        out.raw = vec![[0.0; 3]; self.len()];
        out
    }

    pub fn positions_mat(&self) -> Mat {
        Mat::from_shape_fn((self.len(), 3), |(i, k)| self.positions[i][k])
    }
}

/// The `k` keypoints with the lowest saliency uncertainty, ordered by
/// (uncertainty, supervoxel index). Returns every keypoint when `k ≥ M`.
pub fn select_keypoints(ks: &KeypointSet, k: usize) -> KeypointSet {
    let mut order: Vec<usize> = (0..ks.len()).collect();
    order.sort_by(|&a, &b| {
        ks.saliency[a]
            .total_cmp(&ks.saliency[b])
            .then(ks.supervoxel_index[a].cmp(&ks.supervoxel_index[b]))
    });
    order.truncate(k.max(1));
    ks.subset(&order)
}

/// Fraction of a's keypoints (inside the overlap region) that have one of
/// b's keypoints within `radius` once b is brought into a's frame.
///
/// `b_to_a` maps b-frame points into a's frame. With `overlap_range`, only
/// keypoints of a within that range of both sensor origins are counted.
pub fn repeatability(
    ks_a: &KeypointSet,
    ks_b: &KeypointSet,
    b_to_a: &PoseSE3,
    radius: f64,
    overlap_range: Option<f64>,
) -> f64 {
    let b_in_a: Vec<Point3<f64>> = ks_b.positions.iter().map(|p| b_to_a.apply_point(p)).collect();
    let a_to_b = b_to_a.inverse();
    let mut considered = 0usize;
    let mut repeated = 0usize;
    for p in &ks_a.positions {
        if let Some(range) = overlap_range {
            if p.coords.norm() > range || a_to_b.apply_point(p).coords.norm() > range {
                continue;
            }
        }
        considered += 1;
        if b_in_a.iter().any(|q| (q - p).norm() <= radius) {
            repeated += 1;
        }
    }
    if considered == 0 {
        log::warn!("repeatability over an empty keypoint set");
        return 0.0;
    }
    repeated as f64 / considered as f64
}

/// Supervoxel the Cartesian point falls in, as level indices.
pub fn supervoxel_of(p: &Point3<f64>, grid: &SupervoxelGrid) -> [i32; 3] {
    let c = cart_to_cyl(p);
    [
        (c.rho / grid.s_rho).floor() as i32,
        (c.theta / grid.s_theta).floor() as i32,
        (c.z / grid.s_z).floor() as i32,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn full_grid() -> SupervoxelGrid {
        SupervoxelGrid::from_stride(&QuantizationSpec::full(), [8, 8, 8])
    }

    #[test]
    fn full_supervoxel_extents() {
        let g = full_grid();
        assert!((g.s_rho - 2.4).abs() < 1e-12);
        assert!((g.s_theta.to_degrees() - 8.0).abs() < 1e-12);
        assert!((g.s_z - 1.6).abs() < 1e-12);
    }

    #[test]
    fn decode_examples() {
        let g = full_grid();
        let c = CylPoint { rho: 10.0, theta: 0.3, z: 1.0 };
        assert_eq!(decode_cylindrical([0.0; 3], &g, &c), c);
        let d = decode_cylindrical([1.0, 0.0, 0.0], &g, &c);
        assert!((d.rho - 11.2).abs() < 1e-6);
    }

    fn toy_set(saliency: &[f64]) -> KeypointSet {
        let n = saliency.len();
        KeypointSet {
            positions: (0..n).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect(),
            raw: vec![[0.0; 3]; n],
            saliency: saliency.to_vec(),
            descriptors: Mat::zeros((n, 4)),
            supervoxel_centers: vec![CylPoint { rho: 1.0, theta: 0.0, z: 0.0 }; n],
            supervoxel_index: (0..n).collect(),
        }
    }

    #[test]
    fn selection_orders_by_uncertainty() {
        let ks = toy_set(&[3.0, 1.0, 2.0]);
        assert_eq!(select_keypoints(&ks, 2).supervoxel_index, vec![1, 2]);
        assert_eq!(select_keypoints(&ks, 10).len(), 3);
        let tied = toy_set(&[1.0, 1.0, 0.5]);
        assert_eq!(select_keypoints(&tied, 3).supervoxel_index, vec![2, 0, 1]);
    }

    #[test]
    fn repeatability_examples() {
        let ks = toy_set(&[1.0, 1.0, 1.0]);
        assert_eq!(repeatability(&ks, &ks, &PoseSE3::identity(), 0.5, None), 1.0);
        let far = PoseSE3::from_yaw(0.0, Vector3::new(0.0, 50.0, 0.0));
        assert_eq!(repeatability(&ks, &ks, &far, 0.5, None), 0.0);
        let empty = ks.subset(&[]);
        assert_eq!(repeatability(&empty, &ks, &PoseSE3::identity(), 0.5, None), 0.0);
    }
}
