//! Coordinate systems, rigid transforms, preprocessing and augmentation.
//!
//! Points are Cartesian meters in the sensor frame. The network consumes
//! them in cylindrical coordinates `(rho, theta, z)` quantized on a regular
//! grid whose azimuth axis closes on itself (an exact number of bins around
//! the circle).

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Unordered set of 3D points in the sensor frame, meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self { points }
    }

    pub fn from_xyz(xyz: &[[f64; 3]]) -> Self {
        Self::new(xyz.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Point3<f64>> {
        self.points.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite())
    }

    /// Axis-aligned bounding box `(min, max)`, `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }
}

/// Rigid transform mapping sensor-frame points into a parent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Tolerance on `RᵀR = I` and `det R = 1` for a pose to count as valid.
pub const POSE_TOLERANCE: f64 = 1e-9;

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        if !pose.is_valid(POSE_TOLERANCE) {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal with det +1: {rotation}"
            )));
        }
        Ok(pose)
    }

    /// Rotation about +z by `yaw` radians followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation,
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max() <= tol;
        let det = (r.determinant() - 1.0).abs() <= tol;
        let finite = r.iter().chain(self.translation.iter()).all(|v| v.is_finite());
        ortho && det && finite
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::new(cloud.points.iter().map(|p| self.apply_point(p)).collect())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// `a⁻¹ ∘ b`: maps frame-`b` points into frame `a`.
    pub fn relative(a: &PoseSE3, b: &PoseSE3) -> Self {
        a.inverse().compose(b)
    }

    /// Heading of the rotated x axis in the x-y plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    /// Parses a row-major 3×4 matrix. A rotation within `tol` of orthonormal
    /// is projected back onto SO(3); anything farther is rejected.
    pub fn from_row_major(values: &[f64; 12], tol: f64) -> Result<Self> {
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8],
            values[9], values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite pose entry".into()));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > tol || (rotation.determinant() - 1.0).abs() > tol {
            return Err(Error::InvalidPose(format!(
                "rotation deviates from orthonormal by {err:.3e}"
            )));
        }
        Ok(Self {
            rotation: orthonormalize(&rotation),
            translation,
        })
    }

    pub fn angle_deg(&self) -> f64 {
        rotation_angle(&self.rotation).to_degrees()
    }
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

/// Rotation angle in radians, `arccos((tr R - 1) / 2)` with the argument clamped.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Cylindrical point; `theta` lies in `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylPoint {
    pub rho: f64,
    pub theta: f64,
    pub z: f64,
}

/// Points closer than this to the z axis get `theta = 0`.
pub const RHO_EPS: f64 = 1e-9;

pub fn cart_to_cyl(p: &Point3<f64>) -> CylPoint {
    let rho = p.x.hypot(p.y);
    let theta = if rho < RHO_EPS { 0.0 } else { wrap_angle(p.y.atan2(p.x)) };
    CylPoint { rho, theta, z: p.z }
}

pub fn cyl_to_cart(c: &CylPoint) -> Point3<f64> {
    let (s, co) = c.theta.sin_cos();
    Point3::new(c.rho * co, c.rho * s, c.z)
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Keeps points strictly above `z_min`.
pub fn remove_ground(cloud: &PointCloud, z_min: f64) -> PointCloud {
    PointCloud::new(cloud.points.iter().filter(|p| p.z > z_min).copied().collect())
}

/// Quantization steps of the cylindrical voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizationSpec {
    /// Radial step, meters.
    pub rho_step: f64,
    /// Azimuth step, degrees.
    pub theta_step_deg: f64,
    /// Vertical step, meters.
    pub z_step: f64,
}

impl QuantizationSpec {
    /// 0.3 m × 1° × 0.2 m.
    pub fn full() -> Self {
        Self {
            rho_step: 0.3,
            theta_step_deg: 1.0,
            z_step: 0.2,
        }
    }

    /// 0.3 m × 1.875° × 0.2 m: 192 azimuth bins, divisible by 32.
    pub fn toy() -> Self {
        Self {
            rho_step: 0.3,
            theta_step_deg: 1.875,
            z_step: 0.2,
        }
    }

    pub fn theta_step(&self) -> f64 {
        self.theta_step_deg.to_radians()
    }

    /// Number of azimuth bins around the full circle.
    pub fn theta_bins(&self) -> usize {
        (360.0 / self.theta_step_deg).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho_step > 0.0 && self.theta_step_deg > 0.0 && self.z_step > 0.0) {
            return Err(Error::Config("quantization steps must be positive".into()));
        }
        let bins = 360.0 / self.theta_step_deg;
        if (bins - bins.round()).abs() > 1e-9 * bins.max(1.0) {
            return Err(Error::Config(format!(
                "360° / theta_step = {bins} is not an integer bin count"
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> [f64; 3] {
        [self.rho_step, self.theta_step(), self.z_step]
    }
}

/// Voxel index on the base (stride 1) grid, tagged with its batch element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub batch_index: u32,
    pub i_rho: i32,
    pub i_theta: i32,
    pub i_z: i32,
}

impl VoxelCoord {
    pub fn new(batch_index: u32, i_rho: i32, i_theta: i32, i_z: i32) -> Self {
        Self {
            batch_index,
            i_rho,
            i_theta,
            i_z,
        }
    }

    pub fn axes(&self) -> [i32; 3] {
        [self.i_rho, self.i_theta, self.i_z]
    }
}

/// Voxel a single cylindrical point falls in.
pub fn voxel_of(c: &CylPoint, q: &QuantizationSpec, batch_index: u32) -> VoxelCoord {
    let bins = q.theta_bins() as i32;
    let i_theta = ((c.theta / q.theta_step()).floor() as i32).clamp(0, bins - 1);
    VoxelCoord::new(
        batch_index,
        (c.rho / q.rho_step).floor() as i32,
        i_theta,
        (c.z / q.z_step).floor() as i32,
    )
}

/// Occupied voxels of `cloud`, sorted and deduplicated. Every occupied voxel
/// carries the single feature value 1.
pub fn quantize(cloud: &PointCloud, q: &QuantizationSpec) -> Vec<VoxelCoord> {
    quantize_batch(cloud, q, 0)
}

pub fn quantize_batch(cloud: &PointCloud, q: &QuantizationSpec, batch_index: u32) -> Vec<VoxelCoord> {
    let mut out: Vec<VoxelCoord> = cloud
        .points
        .iter()
        .map(|p| voxel_of(&cart_to_cyl(p), q, batch_index))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Parameters of the global-branch training augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalAugmentation {
    /// Cuboid side lengths are drawn uniformly from this range (meters).
    pub cuboid_side: (f64, f64),
    pub jitter_sigma: f64,
    /// Yaw drawn uniformly from this range (radians).
    pub rotation: (f64, f64),
}

impl Default for GlobalAugmentation {
    fn default() -> Self {
        Self {
            cuboid_side: (2.0, 10.0),
            jitter_sigma: 0.1,
            rotation: (0.0, TAU),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Random cuboid removal, Gaussian jitter, then a random rotation about z.
pub fn augment_global<R: Rng + ?Sized>(
    cloud: &PointCloud,
    rng: &mut R,
    params: &GlobalAugmentation,
) -> PointCloud {
    let mut points = cloud.points.clone();
    if let Some((lo, hi)) = cloud.bounds() {
        let center = Vector3::new(
            uniform(rng, (lo.x, hi.x)),
            uniform(rng, (lo.y, hi.y)),
            uniform(rng, (lo.z, hi.z)),
        );
        let half = Vector3::new(
            uniform(rng, params.cuboid_side) / 2.0,
            uniform(rng, params.cuboid_side) / 2.0,
            uniform(rng, params.cuboid_side) / 2.0,
        );
        if half.iter().all(|h| *h > 0.0) {
            points.retain(|p| {
                let d = (p.coords - center).abs();
                !(d.x <= half.x && d.y <= half.y && d.z <= half.z)
            });
        }
    }
    if params.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, params.jitter_sigma).expect("valid sigma");
        for p in &mut points {
            p.x += normal.sample(rng);
            p.y += normal.sample(rng);
            p.z += normal.sample(rng);
        }
    }
    let yaw = uniform(rng, params.rotation);
    PoseSE3::from_yaw(yaw, Vector3::zeros()).apply(&PointCloud::new(points))
}

/// Parameters of the local-branch training augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalAugmentation {
    /// Upper bound on the x-y translation norm, meters.
    pub max_translation: f64,
    pub rotation: (f64, f64),
}

impl Default for LocalAugmentation {
    fn default() -> Self {
        Self {
            max_translation: 5.0,
            rotation: (0.0, TAU),
        }
    }
}

/// Random z-rotation plus x-y translation. Returns the augmented cloud and
/// the transform `T` with `augmented = T · cloud`.
pub fn augment_local<R: Rng + ?Sized>(
    cloud: &PointCloud,
    rng: &mut R,
    params: &LocalAugmentation,
) -> (PointCloud, PoseSE3) {
    let yaw = uniform(rng, params.rotation);
    // uniform over the disk of radius max_translation
    let r = params.max_translation * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..TAU);
    let t = Vector3::new(r * phi.cos(), r * phi.sin(), 0.0);
    let pose = PoseSE3::from_yaw(yaw, t);
    (pose.apply(cloud), pose)
}

/// Greedy decimation: keeps a pose when it lies at least `min_disp` from the
/// previously kept one. The first pose is always kept.
pub fn decimate_trajectory(poses: &[PoseSE3], min_disp: f64) -> Vec<usize> {
    let mut kept = Vec::new();
    let mut last: Option<Vector3<f64>> = None;
    for (i, pose) in poses.iter().enumerate() {
        match last {
            Some(t) if (pose.translation - t).norm() < min_disp => {}
            _ => {
                kept.push(i);
                last = Some(pose.translation);
            }
        }
    }
    kept
}

/// Angle in degrees between two headings, folded into `[0, 180]`.
pub fn heading_difference_deg(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b);
    (if d > PI { TAU - d } else { d }).to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64, z: f64) -> Point3<f64> {
        Point3::new(x, y, z)
    }

    #[test]
    fn cylindrical_conversion_examples() {
        let c = cart_to_cyl(&pt(3.0, 4.0, 2.0));
        assert_abs_diff_eq!(c.rho, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.theta, 4f64.atan2(3.0), epsilon = 1e-12);
        assert_eq!(c.z, 2.0);
        assert_eq!(cart_to_cyl(&pt(1.0, 0.0, 7.0)), CylPoint { rho: 1.0, theta: 0.0, z: 7.0 });
        let c = cart_to_cyl(&pt(0.0, 1.0, 0.0));
        assert_abs_diff_eq!(c.theta, PI / 2.0, epsilon = 1e-15);
        // degenerate axis point
        assert_eq!(cart_to_cyl(&pt(0.0, 0.0, 3.0)).theta, 0.0);
        // negative angles wrap
        let c = cart_to_cyl(&pt(0.0, -1.0, 0.0));
        assert_abs_diff_eq!(c.theta, 1.5 * PI, epsilon = 1e-12);

        let p = cyl_to_cart(&CylPoint { rho: 5.0, theta: PI, z: 2.0 });
        assert_abs_diff_eq!(p, pt(-5.0, 0.0, 2.0), epsilon = 1e-12);
        let p = cyl_to_cart(&CylPoint { rho: 2.0, theta: PI / 2.0, z: -1.0 });
        assert_abs_diff_eq!(p, pt(0.0, 2.0, -1.0), epsilon = 1e-12);
        assert_eq!(cyl_to_cart(&CylPoint { rho: 1.0, theta: 0.0, z: 0.0 }), pt(1.0, 0.0, 0.0));
    }

    #[test]
    fn ground_removal() {
        let cloud = PointCloud::from_xyz(&[[0.0, 0.0, -1.0], [0.0, 0.0, 0.5]]);
        assert_eq!(remove_ground(&cloud, -0.9).points, vec![pt(0.0, 0.0, 0.5)]);
        assert_eq!(remove_ground(&cloud, f64::NEG_INFINITY), cloud);
        assert!(remove_ground(&cloud, 1.0).is_empty());
    }

    #[test]
    fn quantize_examples() {
        let q = QuantizationSpec::full();
        let v = quantize(&PointCloud::from_xyz(&[[0.65, 0.0, 0.0]]), &q);
        assert_eq!(v, vec![VoxelCoord::new(0, 2, 0, 0)]);
        let v = quantize(&PointCloud::from_xyz(&[[0.65, 0.0, 0.0], [0.62, 0.001, 0.05]]), &q);
        assert_eq!(v.len(), 1);
    }

    #[test]
    fn quantization_spec_validation() {
        assert!(QuantizationSpec::full().validate().is_ok());
        assert!(QuantizationSpec::toy().validate().is_ok());
        assert_eq!(QuantizationSpec::toy().theta_bins(), 192);
        let bad = QuantizationSpec { theta_step_deg: 7.0, ..QuantizationSpec::full() };
        assert!(bad.validate().is_err());
        let bad = QuantizationSpec { rho_step: 0.0, ..QuantizationSpec::full() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn se3_examples() {
        let cloud = PointCloud::from_xyz(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 1.0]]);
        assert_eq!(PoseSE3::identity().apply(&cloud), cloud);
        let yaw = PoseSE3::from_yaw(PI / 2.0, Vector3::zeros());
        assert_abs_diff_eq!(yaw.apply_point(&pt(1.0, 0.0, 0.0)), pt(0.0, 1.0, 0.0), epsilon = 1e-12);
        let t = PoseSE3::from_axis_angle(Vector3::new(1.0, 2.0, 3.0), 0.7, Vector3::new(4.0, -1.0, 2.0));
        let rel = PoseSE3::relative(&t, &t);
        assert_abs_diff_eq!(rel.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(rel.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn pose_constructor_rejects_reflections() {
        let refl = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(PoseSE3::new(refl, Vector3::zeros()).is_err());
        assert!(PoseSE3::new(Matrix3::identity(), Vector3::zeros()).is_ok());
    }

    #[test]
    fn row_major_reorthonormalizes_within_tolerance() {
        let pose = PoseSE3::from_yaw(0.3, Vector3::new(1.0, 2.0, 3.0));
        let mut rm = pose.to_row_major();
        rm[0] += 1e-5;
        let back = PoseSE3::from_row_major(&rm, 1e-3).unwrap();
        assert!(back.is_valid(1e-12));
        rm[0] += 0.1;
        assert!(PoseSE3::from_row_major(&rm, 1e-3).is_err());
    }

    #[test]
    fn augment_global_identity_and_half_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = PointCloud::from_xyz(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 1.0], [2.0, 2.0, 0.0]]);
        let none = GlobalAugmentation { cuboid_side: (0.0, 0.0), jitter_sigma: 0.0, rotation: (0.0, 0.0) };
        assert_eq!(augment_global(&cloud, &mut rng, &none), cloud);
        let half = GlobalAugmentation { rotation: (PI, PI), ..none };
        let out = augment_global(&cloud, &mut rng, &half);
        for (a, b) in out.iter().zip(cloud.iter()) {
            assert_abs_diff_eq!(*a, pt(-b.x, -b.y, b.z), epsilon = 1e-12);
        }
    }

    #[test]
    fn augment_global_is_deterministic_and_removes_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = PointCloud::new(
            (0..2000)
                .map(|_| pt(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(0.0..5.0)))
                .collect(),
        );
        let run = |seed| augment_global(&cloud, &mut ChaCha8Rng::seed_from_u64(seed), &GlobalAugmentation::default());
        assert_eq!(run(4), run(4));
        assert!(run(4).len() <= cloud.len());
        let removed: usize = (0..20).map(|s| cloud.len() - run(s).len()).sum();
        assert!(removed > 0);
    }

    #[test]
    fn augment_local_round_trip_and_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = PointCloud::from_xyz(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 1.0]]);
        let zero = LocalAugmentation { max_translation: 0.0, rotation: (0.0, 0.0) };
        let (same, pose) = augment_local(&cloud, &mut rng, &zero);
        assert_eq!(same, cloud);
        assert_eq!(pose, PoseSE3::identity());

        let (moved, pose) = augment_local(&cloud, &mut rng, &LocalAugmentation::default());
        let back = pose.inverse().apply(&moved);
        for (a, b) in back.iter().zip(cloud.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
        for _ in 0..10_000 {
            let (_, p) = augment_local(&cloud, &mut rng, &LocalAugmentation::default());
            assert!(p.translation.xy().norm() <= 5.0);
            assert_eq!(p.translation.z, 0.0);
        }
    }

    #[test]
    fn decimation_examples() {
        let at = |x: f64| PoseSE3::from_yaw(0.0, Vector3::new(x, 0.0, 0.0));
        assert_eq!(decimate_trajectory(&[at(0.0), at(0.0), at(0.0)], 0.2), vec![0]);
        assert_eq!(decimate_trajectory(&[at(0.0), at(0.0), at(0.0)], 0.0), vec![0, 1, 2]);
        let poses = [at(0.0), at(0.1), at(0.25), at(0.5)];
        assert_eq!(decimate_trajectory(&poses, 0.2), vec![0, 2, 3]);
        assert!(decimate_trajectory(&[], 0.2).is_empty());
    }

    #[test]
    fn heading_difference_folds() {
        assert_abs_diff_eq!(heading_difference_deg(0.1, -0.1), 0.2f64.to_degrees(), epsilon = 1e-9);
        assert_abs_diff_eq!(heading_difference_deg(PI - 0.1, -PI + 0.1), 0.2f64.to_degrees(), epsilon = 1e-9);
    }

    mod rotation_shift {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// A yaw of k azimuth steps shifts every voxel by k bins (mod the
            /// bin count) and leaves ρ and z alone. Points are kept away from
            /// bin edges so rounding cannot move them across one.
            #[test]
            fn yaw_by_whole_bins_shifts_theta_index(
                pts in prop::collection::vec((0usize..192, 0.1f64..0.9, 0.5f64..40.0, -2.0f64..3.0), 1..60),
                k in 0i32..192,
            ) {
                let q = QuantizationSpec::toy();
                let bins = q.theta_bins() as i32;
                let step = q.theta_step();
                let xyz: Vec<[f64; 3]> = pts
                    .iter()
                    .map(|&(j, u, rho, z)| {
                        let theta = (j as f64 + u) * step;
                        // Centre ρ and z inside their bins too.
                        let rho = ((rho / q.rho_step).floor() + 0.5) * q.rho_step;
                        let z = ((z / q.z_step).floor() + 0.5) * q.z_step;
                        [rho * theta.cos(), rho * theta.sin(), z]
                    })
                    .collect();
                let cloud = PointCloud::from_xyz(&xyz);
                let rotated = PoseSE3::from_yaw(k as f64 * step, Vector3::zeros()).apply(&cloud);
                let mut expected: Vec<VoxelCoord> = quantize(&cloud, &q)
                    .into_iter()
                    .map(|v| VoxelCoord::new(0, v.i_rho, (v.i_theta + k).rem_euclid(bins), v.i_z))
                    .collect();
                expected.sort_unstable();
                prop_assert_eq!(quantize(&rotated, &q), expected);
            }
        }
    }
}
