//! Synthetic rotating-LiDAR worlds, traversals with ground-truth poses,
//! point-cloud / pose / manifest files, and training-pair pools.
//!
//! The world is a closed road loop lined with poles, yawed boxes and small
//! clutter. A scan casts one ray per (ring, azimuth) bin from the sensor and
//! keeps the nearest hit within range; the ground is never hit because it is
//! not part of the world.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, PoseSE3};

/// Tolerance for re-orthonormalizing rotations read from pose files.
pub const POSE_FILE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    /// Half side of the square world, meters.
    pub extent: f64,
    /// Mean radius of the road loop.
    pub loop_radius: f64,
    /// Relative radial wobble of the loop, keeps places distinguishable.
    pub loop_wobble: f64,
    /// Objects keep this clearance from the road center line.
    pub road_half_width: f64,
    /// Objects are placed up to this far from the road.
    pub max_offset: f64,
    pub poles: usize,
    pub pole_radius: (f64, f64),
    pub pole_height: (f64, f64),
    pub boxes: usize,
    /// Side length range of building-like boxes.
    pub box_size: (f64, f64),
    pub box_height: (f64, f64),
    pub scatter: usize,
    pub scatter_size: (f64, f64),
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            extent: 160.0,
            loop_radius: 80.0,
            loop_wobble: 0.25,
            road_half_width: 4.0,
            max_offset: 35.0,
            poles: 260,
            pole_radius: (0.15, 0.5),
            pole_height: (3.0, 9.0),
            boxes: 110,
            box_size: (3.0, 14.0),
            box_height: (3.0, 14.0),
            scatter: 200,
            scatter_size: (0.4, 1.6),
            seed: 7,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1 && r.1.is_finite();
        if !(self.extent > 0.0 && self.loop_radius > 0.0 && self.road_half_width >= 0.0) {
            return Err(Error::Config("world extent, loop radius must be positive".into()));
        }
        if !(0.0..0.9).contains(&self.loop_wobble) {
            return Err(Error::Config("world.loop_wobble must be in [0, 0.9)".into()));
        }
        for (name, r) in [
            ("pole_radius", self.pole_radius),
            ("pole_height", self.pole_height),
            ("box_size", self.box_size),
            ("box_height", self.box_height),
            ("scatter_size", self.scatter_size),
        ] {
            if !ok_range(r) {
                return Err(Error::Config(format!("world.{name} must be a positive (min, max) range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSpec {
    pub max_range: f64,
    pub min_range: f64,
    pub azimuth_resolution_deg: f64,
    pub rings: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Gaussian range noise.
    pub noise_sigma: f64,
    /// Height of the sensor above the ground.
    pub sensor_height: f64,
    pub ground_z: f64,
}

impl Default for ScanSpec {
    fn default() -> Self {
        Self {
            max_range: 80.0,
            min_range: 1.0,
            azimuth_resolution_deg: 1.0,
            rings: 16,
            elevation_min_deg: -10.0,
            elevation_max_deg: 15.0,
            noise_sigma: 0.02,
            sensor_height: 1.8,
            ground_z: 0.0,
        }
    }
}

impl ScanSpec {
    pub fn toy() -> Self {
        Self {
            max_range: 40.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_range > 0.0 && self.azimuth_resolution_deg > 0.0 && self.rings > 0) {
            return Err(Error::Config("scan max_range, resolution and rings must be positive".into()));
        }
        if !(self.min_range >= 0.0 && self.min_range < self.max_range && self.noise_sigma >= 0.0) {
            return Err(Error::Config("scan needs 0 <= min_range < max_range and noise >= 0".into()));
        }
        Ok(())
    }

    pub fn azimuth_bins(&self) -> usize {
        (360.0 / self.azimuth_resolution_deg).round() as usize
    }

    pub fn ray_count(&self) -> usize {
        self.rings * self.azimuth_bins()
    }

    fn elevations(&self) -> Vec<f64> {
        if self.rings == 1 {
            return vec![self.elevation_min_deg.to_radians()];
        }
        (0..self.rings)
            .map(|i| {
                let t = i as f64 / (self.rings - 1) as f64;
                (self.elevation_min_deg + t * (self.elevation_max_deg - self.elevation_min_deg)).to_radians()
            })
            .collect()
    }
}

/// Sampling of one traversal along the road loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    /// Number of scans; 0 covers one full loop at `spacing`.
    pub count: usize,
    /// Arc-length spacing between consecutive scans; 0 spreads `count`
    /// scans evenly over one loop.
    pub spacing: f64,
    /// Arc length of the first scan.
    pub start: f64,
    /// Constant sideways offset from the road center (left positive).
    pub lateral_offset: f64,
    /// Per-scan uniform perturbation bounds.
    pub perturb_lateral: f64,
    pub perturb_along: f64,
    pub perturb_yaw_deg: f64,
    /// Driving speed, sets the timestamps.
    pub speed: f64,
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            count: 200,
            spacing: 2.5,
            start: 0.0,
            lateral_offset: 0.0,
            perturb_lateral: 0.0,
            perturb_along: 0.0,
            perturb_yaw_deg: 0.0,
            speed: 10.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Obstacle {
    /// Vertical cylinder standing on the ground.
    Pole { center: Vector2<f64>, radius: f64, height: f64 },
    /// Box standing on the ground, rotated by `yaw` about the vertical.
    Block {
        center: Vector2<f64>,
        half: Vector2<f64>,
        yaw: f64,
        height: f64,
    },
}

impl Obstacle {
    fn center(&self) -> Vector2<f64> {
        match self {
            Obstacle::Pole { center, .. } | Obstacle::Block { center, .. } => *center,
        }
    }

    fn footprint_radius(&self) -> f64 {
        match self {
            Obstacle::Pole { radius, .. } => *radius,
            Obstacle::Block { half, .. } => half.norm(),
        }
    }

    /// Nearest ray parameter `t >= t_min` where `o + t d` enters the solid.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, ground: f64, t_min: f64) -> Option<f64> {
        match self {
            Obstacle::Pole { center, radius, height } => {
                let (ox, oy) = (o.x - center.x, o.y - center.y);
                let a = d.x * d.x + d.y * d.y;
                if a < 1e-12 {
                    return None;
                }
                let b = 2.0 * (ox * d.x + oy * d.y);
                let c = ox * ox + oy * oy - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)].into_iter().find(|&t| {
                    let z = o.z + t * d.z;
                    t >= t_min && z >= ground && z <= ground + height
                })
            }
            Obstacle::Block { center, half, yaw, height } => {
                let (s, c) = (-yaw).sin_cos();
                let rel = Vector2::new(o.x - center.x, o.y - center.y);
                let lo = [c * rel.x - s * rel.y, s * rel.x + c * rel.y, o.z];
                let ld = [c * d.x - s * d.y, s * d.x + c * d.y, d.z];
                let bounds = [(-half.x, half.x), (-half.y, half.y), (ground, ground + height)];
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if ld[k].abs() < 1e-12 {
                        if lo[k] < bounds[k].0 || lo[k] > bounds[k].1 {
                            return None;
                        }
                        continue;
                    }
                    let ta = (bounds[k].0 - lo[k]) / ld[k];
                    let tb = (bounds[k].1 - lo[k]) / ld[k];
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
                if t0 > t1 || t1 < t_min {
                    return None;
                }
                (t0 >= t_min).then_some(t0)
            }
        }
    }
}

/// Closed road center line sampled densely by arc length.
#[derive(Debug, Clone)]
pub struct RoadLoop {
    points: Vec<Vector2<f64>>,
    arc: Vec<f64>,
}

impl RoadLoop {
    fn new(radius: f64, wobble: f64) -> Self {
        let n = 4096;
        let points: Vec<Vector2<f64>> = (0..=n)
            .map(|i| {
                let phi = i as f64 / n as f64 * std::f64::consts::TAU;
                let r = radius * (1.0 + wobble * (2.0 * phi + 0.7).sin() + 0.6 * wobble * (3.0 * phi).cos());
                Vector2::new(r * phi.cos(), r * phi.sin())
            })
            .collect();
        let mut arc = vec![0.0];
        for w in points.windows(2) {
            arc.push(arc.last().expect("non-empty") + (w[1] - w[0]).norm());
        }
        Self { points, arc }
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().expect("non-empty")
    }

    /// Position and unit tangent at arc length `s` (wrapped).
    pub fn at(&self, s: f64) -> (Vector2<f64>, Vector2<f64>) {
        let s = s.rem_euclid(self.length());
        let i = self.arc.partition_point(|&a| a <= s).clamp(1, self.arc.len() - 1);
        let (a0, a1) = (self.arc[i - 1], self.arc[i]);
        let t = if a1 > a0 { (s - a0) / (a1 - a0) } else { 0.0 };
        let seg = self.points[i] - self.points[i - 1];
        (self.points[i - 1] + seg * t, seg.normalize())
    }

    /// Distance from `p` to the center line.
    pub fn distance(&self, p: &Vector2<f64>) -> f64 {
        self.points
            .windows(2)
            .map(|w| {
                let seg = w[1] - w[0];
                let t = ((p - w[0]).dot(&seg) / seg.norm_squared()).clamp(0.0, 1.0);
                (p - (w[0] + seg * t)).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub road: RoadLoop,
    pub obstacles: Vec<Obstacle>,
}

impl World {
    /// World made of the given obstacles around the default road.
    pub fn from_obstacles(spec: WorldSpec, obstacles: Vec<Obstacle>) -> Self {
        let road = RoadLoop::new(spec.loop_radius, spec.loop_wobble);
        Self { spec, road, obstacles }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let road = RoadLoop::new(spec.loop_radius, spec.loop_wobble);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut obstacles = Vec::new();
    let kinds = [(0u8, spec.poles), (1, spec.boxes), (2, spec.scatter)];
    for (kind, count) in kinds {
        let mut placed = 0;
        let mut attempts = 0;
        while placed < count && attempts < count * 50 {
            attempts += 1;
            let s = rng.random_range(0.0..road.length());
            let (p, tangent) = road.at(s);
            let normal = Vector2::new(-tangent.y, tangent.x);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let offset = rng.random_range(spec.road_half_width..spec.road_half_width + spec.max_offset);
            let center = p + normal * side * offset;
            let ob = match kind {
                0 => Obstacle::Pole {
                    center,
                    radius: uniform(&mut rng, spec.pole_radius),
                    height: uniform(&mut rng, spec.pole_height),
                },
                1 => Obstacle::Block {
                    center,
                    half: Vector2::new(uniform(&mut rng, spec.box_size), uniform(&mut rng, spec.box_size)) / 2.0,
                    yaw: rng.random_range(0.0..std::f64::consts::PI),
                    height: uniform(&mut rng, spec.box_height),
                },
                _ => {
                    let side = uniform(&mut rng, spec.scatter_size);
                    Obstacle::Block {
                        center,
                        half: Vector2::new(side, side * rng.random_range(0.5..1.5)) / 2.0,
                        yaw: rng.random_range(0.0..std::f64::consts::PI),
                        height: side,
                    }
                }
            };
            let r = ob.footprint_radius();
            let inside = center.x.abs() + r <= spec.extent && center.y.abs() + r <= spec.extent;
            if inside && road.distance(&center) >= spec.road_half_width + r {
                obstacles.push(ob);
                placed += 1;
            }
        }
    }
    Ok(World { spec: spec.clone(), road, obstacles })
}

/// One scan with its sensor pose (sensor frame → world frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub cloud: PointCloud,
    pub pose: PoseSE3,
    pub timestamp: f64,
}

/// Casts every ray of `scan` from `pose` and returns the hits in sensor frame.
pub fn simulate_scan(world: &World, pose: &PoseSE3, scan: &ScanSpec, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, scan.noise_sigma.max(0.0)).expect("valid sigma");
    let origin = pose.translation;
    let near: Vec<&Obstacle> = world
        .obstacles
        .iter()
        .filter(|o| (o.center() - origin.xy()).norm() <= scan.max_range + o.footprint_radius())
        .collect();
    let mut points = Vec::new();
    let bins = scan.azimuth_bins();
    // firing phase of the spinning head, so beams do not sit on fixed azimuths
    let phase: f64 = rng.random_range(0.0..1.0);
    for elev in scan.elevations() {
        for a in 0..bins {
            let az = (a as f64 + phase) * std::f64::consts::TAU / bins as f64;
            let local = Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            let dir = pose.rotation * local;
            let hit = near
                .iter()
                .filter_map(|o| o.intersect(&origin, &dir, scan.ground_z, scan.min_range))
                .fold(f64::INFINITY, f64::min);
            // draw noise for every ray so the stream does not depend on hits
            let n = if scan.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            if hit <= scan.max_range {
                let range = (hit + n).clamp(scan.min_range, scan.max_range);
                points.push(Point3::from(local * range));
            }
        }
    }
    PointCloud::new(points)
}

/// Poses of a traversal along the road loop.
pub fn trajectory_poses(world: &World, traj: &TrajectorySpec, scan: &ScanSpec) -> Result<Vec<PoseSE3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(traj.seed);
    let mut sym = |b: f64| if b > 0.0 { rng.random_range(-b..b) } else { 0.0 };
    let mut poses = Vec::with_capacity(traj.count);
    for i in 0..traj.count {
        let along = sym(traj.perturb_along);
        let lateral = sym(traj.perturb_lateral);
        let dyaw = sym(traj.perturb_yaw_deg).to_radians();
        let (p, tangent) = world.road.at(traj.start + i as f64 * traj.spacing + along);
        let normal = Vector2::new(-tangent.y, tangent.x);
        let xy = p + normal * (traj.lateral_offset + lateral);
        if xy.x.abs() > world.spec.extent || xy.y.abs() > world.spec.extent {
            return Err(Error::Data(format!(
                "trajectory leaves the world at scan {i} ({:.1}, {:.1})",
                xy.x, xy.y
            )));
        }
        let yaw = tangent.y.atan2(tangent.x) + dyaw;
        poses.push(PoseSE3::from_yaw(
            yaw,
            Vector3::new(xy.x, xy.y, scan.ground_z + scan.sensor_height),
        ));
    }
    Ok(poses)
}

impl TrajectorySpec {
    /// Replaces the zero `count` / `spacing` shorthands by explicit values.
    pub fn resolved(&self, road_length: f64) -> Result<TrajectorySpec> {
        let mut out = self.clone();
        match (self.count, self.spacing != 0.0) {
            (0, false) => return Err(Error::Config("trajectory needs a positive count or spacing".into())),
            (0, true) => out.count = (road_length / self.spacing).floor() as usize,
            (n, false) => out.spacing = road_length / n as f64,
            _ => {}
        }
        Ok(out)
    }
}

pub fn generate_traversal(world: &World, traj: &TrajectorySpec, scan: &ScanSpec) -> Result<Vec<Scan>> {
    scan.validate()?;
    let traj = &traj.resolved(world.road.length())?;
    if traj.spacing <= 0.0 || traj.speed <= 0.0 {
        return Err(Error::Config("trajectory spacing and speed must be positive".into()));
    }
    let poses = trajectory_poses(world, traj, scan)?;
    let scans = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let seed = traj.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            Scan {
                cloud: simulate_scan(world, pose, scan, seed),
                pose: pose.clone(),
                timestamp: i as f64 * traj.spacing / traj.speed,
            }
        })
        .collect();
    Ok(scans)
}

/// On-disk record layout of a cloud file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudLayout {
    #[default]
    Xyz,
    /// Intensity is read and dropped.
    Xyzi,
}

impl CloudLayout {
    pub fn record_bytes(self) -> usize {
        match self {
            CloudLayout::Xyz => 12,
            CloudLayout::Xyzi => 16,
        }
    }
}

impl std::str::FromStr for CloudLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz" => Ok(Self::Xyz),
            "xyzi" => Ok(Self::Xyzi),
            other => Err(Error::Config(format!("unknown cloud layout {other:?}, expected xyz or xyzi"))),
        }
    }
}

pub fn decode_cloud(bytes: &[u8], layout: CloudLayout, path: &Path) -> Result<PointCloud> {
    let rec = layout.record_bytes();
    if bytes.len() % rec != 0 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % rec) as u64,
            reason: format!("{} bytes is not a multiple of the {rec}-byte record", bytes.len()),
        });
    }
    let f = |c: &[u8]| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
    Ok(PointCloud::new(
        bytes
            .chunks_exact(rec)
            .map(|r| Point3::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12])))
            .collect(),
    ))
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    encode_cloud_as(cloud, CloudLayout::Xyz)
}

/// Encodes in `layout`; xyzi records carry zero intensity.
pub fn encode_cloud_as(cloud: &PointCloud, layout: CloudLayout) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * layout.record_bytes());
    for p in cloud.iter() {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if layout == CloudLayout::Xyzi {
            out.extend_from_slice(&0f32.to_le_bytes());
        }
    }
    out
}

pub fn load_cloud(path: &Path, layout: CloudLayout) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    decode_cloud(&bytes, layout, path)
}

/// Writes little-endian `f32` xyz records.
pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_cloud(cloud)).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn pose_values(pose: &PoseSE3) -> String {
    pose.to_row_major()
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_pose_line(line: &str, path: &Path, line_no: usize) -> Result<PoseSE3> {
    let err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        reason,
    };
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| err(format!("not a number: {t:?}"))))
        .collect::<Result<_>>()?;
    let values: [f64; 12] = values
        .try_into()
        .map_err(|v: Vec<f64>| err(format!("expected 12 values, found {}", v.len())))?;
    PoseSE3::from_row_major(&values, POSE_FILE_TOLERANCE).map_err(|e| err(e.to_string()))
}

pub fn save_poses(path: &Path, poses: &[PoseSE3]) -> Result<()> {
    let mut text = String::new();
    for p in poses {
        writeln!(text, "{}", pose_values(p)).expect("string write");
    }
    fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Reads a pose file of 12-value lines; blank lines are skipped.
pub fn load_poses(path: &Path) -> Result<Vec<PoseSE3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_pose_line(l, path, i + 1))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraversalEntry {
    pub cloud_path: PathBuf,
    pub pose: PoseSE3,
    pub timestamp: f64,
}

/// A traversal on disk, described by its manifest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Traversal {
    pub entries: Vec<TraversalEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "index,cloud_path,timestamp,r00,r01,r02,t0,r10,r11,r12,t1,r20,r21,r22,t2";

impl Traversal {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn poses(&self) -> Vec<PoseSE3> {
        self.entries.iter().map(|e| e.pose.clone()).collect()
    }

    /// Writes `scans` under `dir`: `clouds/NNNNNN.bin`, `poses.txt` and the
    /// manifest. Cloud paths in the manifest are relative to `dir`.
    pub fn write(dir: &Path, scans: &[Scan], layout: CloudLayout) -> Result<Traversal> {
        let clouds = dir.join("clouds");
        fs::create_dir_all(&clouds).map_err(|e| Error::io(format!("create {}", clouds.display()), e))?;
        let mut entries = Vec::with_capacity(scans.len());
        let mut text = format!("{MANIFEST_HEADER}\n");
        for (i, s) in scans.iter().enumerate() {
            let rel = PathBuf::from(format!("clouds/{i:06}.bin"));
            let path = dir.join(&rel);
            fs::write(&path, encode_cloud_as(&s.cloud, layout))
                .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
            let vals = s.pose.to_row_major().map(|v| v.to_string()).join(",");
            writeln!(text, "{i},{},{},{vals}", rel.display(), s.timestamp).expect("string write");
            entries.push(TraversalEntry {
                cloud_path: dir.join(rel),
                pose: s.pose.clone(),
                timestamp: s.timestamp,
            });
        }
        let manifest = dir.join(MANIFEST_FILE);
        fs::write(&manifest, text).map_err(|e| Error::io(format!("write {}", manifest.display()), e))?;
        save_poses(&dir.join("poses.txt"), &scans.iter().map(|s| s.pose.clone()).collect::<Vec<_>>())?;
        Ok(Traversal { entries })
    }

    /// Reads a manifest; `path` may be the file or its directory.
    pub fn load(path: &Path) -> Result<Traversal> {
        let manifest = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text =
            fs::read_to_string(&manifest).map_err(|e| Error::io(format!("read {}", manifest.display()), e))?;
        let mut entries = Vec::new();
        let mut last_time = f64::NEG_INFINITY;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || (i == 0 && line.starts_with("index")) {
                continue;
            }
            let err = |reason: String| Error::Parse {
                path: manifest.clone(),
                line: line_no,
                reason,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 15 {
                return Err(err(format!("expected 15 fields, found {}", fields.len())));
            }
            let timestamp: f64 = fields[2].parse().map_err(|_| err(format!("bad timestamp {:?}", fields[2])))?;
            if timestamp < last_time {
                return Err(err("timestamps must be non-decreasing".into()));
            }
            last_time = timestamp;
            let pose = parse_pose_line(&fields[3..].join(" "), &manifest, line_no)?;
            let cloud_path = PathBuf::from(fields[1]);
            let cloud_path = if cloud_path.is_absolute() { cloud_path } else { base.join(cloud_path) };
            entries.push(TraversalEntry {
                cloud_path,
                pose,
                timestamp,
            });
        }
        Ok(Traversal { entries })
    }

    pub fn load_clouds(&self, layout: CloudLayout) -> Result<Vec<PointCloud>> {
        self.entries.par_iter().map(|e| load_cloud(&e.cloud_path, layout)).collect()
    }

    pub fn load_scans(&self, layout: CloudLayout) -> Result<Vec<Scan>> {
        let clouds = self.load_clouds(layout)?;
        Ok(clouds
            .into_iter()
            .zip(&self.entries)
            .map(|(cloud, e)| Scan {
                cloud,
                pose: e.pose.clone(),
                timestamp: e.timestamp,
            })
            .collect())
    }
}

/// Positive and negative pairs among scans, by sensor-center distance.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPool {
    pub positions: Vec<Vector3<f64>>,
    /// `(i, j)` with `i < j` and distance ≤ the positive threshold.
    pub positives: Vec<(usize, usize)>,
    /// `(i, j)` with `i < j` and distance > the negative threshold.
    pub negatives: Vec<(usize, usize)>,
}

impl PairPool {
    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        let key = (i.min(j), i.max(j));
        self.positives.binary_search(&key).is_ok()
    }

    pub fn is_negative(&self, i: usize, j: usize) -> bool {
        let key = (i.min(j), i.max(j));
        self.negatives.binary_search(&key).is_ok()
    }
}

/// Pools of supervising pairs; mid-range pairs belong to neither.
pub fn sample_pairs(poses: &[PoseSE3], positive_dist: f64, negative_dist: f64) -> Result<PairPool> {
    let positions: Vec<Vector3<f64>> = poses.iter().map(|p| p.translation).collect();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            let d = (positions[i] - positions[j]).norm();
            if d <= positive_dist {
                positives.push((i, j));
            } else if d > negative_dist {
                negatives.push((i, j));
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::Data(format!(
            "no scan pairs within {positive_dist} m; training needs positives"
        )));
    }
    Ok(PairPool {
        positions,
        positives,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world() -> World {
        generate_world(&WorldSpec {
            poles: 40,
            boxes: 15,
            scatter: 20,
            ..WorldSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn traversal_is_deterministic_and_bounded() {
        let world = small_world();
        let scan = ScanSpec::toy();
        let traj = TrajectorySpec {
            count: 3,
            ..TrajectorySpec::default()
        };
        let a = generate_traversal(&world, &traj, &scan).unwrap();
        let b = generate_traversal(&world, &traj, &scan).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!(s.cloud.len() <= scan.ray_count());
            assert!(s.cloud.iter().all(|p| p.coords.norm() <= scan.max_range + 1e-9));
        }
    }

    #[test]
    fn single_pole_scan_lies_on_its_surface() {
        let pole = Obstacle::Pole {
            center: Vector2::new(10.0, 3.0),
            radius: 0.4,
            height: 6.0,
        };
        let world = World::from_obstacles(WorldSpec::default(), vec![pole]);
        let pose = PoseSE3::from_yaw(0.7, Vector3::new(1.0, -2.0, 1.8));
        let scan = ScanSpec {
            noise_sigma: 0.01,
            ..ScanSpec::toy()
        };
        let cloud = simulate_scan(&world, &pose, &scan, 5);
        assert!(cloud.len() > 10);
        for p in cloud.iter() {
            let w = pose.apply_point(p);
            let radial = (w.xy() - Point3::new(10.0, 3.0, 0.0).xy()).norm();
            assert!((radial - 0.4).abs() < 0.06, "radial {radial}");
            assert!(w.z > -0.06 && w.z < 6.06);
        }
    }

    #[test]
    fn perturbed_traversal_stays_within_bounds() {
        let world = small_world();
        let scan = ScanSpec::toy();
        let base = TrajectorySpec {
            count: 20,
            ..TrajectorySpec::default()
        };
        let pert = TrajectorySpec {
            perturb_lateral: 1.0,
            perturb_along: 0.5,
            seed: 9,
            ..base.clone()
        };
        let a = trajectory_poses(&world, &base, &scan).unwrap();
        let b = trajectory_poses(&world, &pert, &scan).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p.translation - q.translation).norm() <= (1.0f64.powi(2) + 0.5f64.powi(2)).sqrt() + 1e-6);
        }
    }

    #[test]
    fn trajectory_outside_world_is_rejected() {
        let world = small_world();
        let traj = TrajectorySpec {
            count: 2,
            lateral_offset: 500.0,
            ..TrajectorySpec::default()
        };
        assert!(trajectory_poses(&world, &traj, &ScanSpec::toy()).is_err());
    }

    #[test]
    fn cloud_files() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.bin");
        fs::write(&empty, b"").unwrap();
        assert!(load_cloud(&empty, CloudLayout::Xyz).unwrap().is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = PointCloud::new(
            (0..100)
                .map(|_| {
                    let mut c = || rng.random_range(-50.0f32..50.0) as f64;
                    Point3::new(c(), c(), c())
                })
                .collect(),
        );
        let path = dir.path().join("c.bin");
        save_cloud(&path, &cloud).unwrap();
        assert_eq!(load_cloud(&path, CloudLayout::Xyz).unwrap(), cloud);

        let mut xyzi = Vec::new();
        for i in 0..5 {
            for v in [i as f32, 1.0, 2.0, 99.0] {
                xyzi.extend_from_slice(&v.to_le_bytes());
            }
        }
        let p4 = dir.path().join("i.bin");
        fs::write(&p4, &xyzi).unwrap();
        let c4 = load_cloud(&p4, CloudLayout::Xyzi).unwrap();
        assert_eq!(c4.len(), 5);
        assert_eq!(c4.points[3], Point3::new(3.0, 1.0, 2.0));

        fs::write(&p4, &xyzi[..30]).unwrap();
        match load_cloud(&p4, CloudLayout::Xyz) {
            Err(Error::Malformed { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pose_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert_eq!(load_poses(&path).unwrap(), vec![PoseSE3::identity()]);

        fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1 0\nhello world\n").unwrap();
        match load_poses(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "2 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert!(matches!(load_poses(&path), Err(Error::Parse { line: 1, .. })));

        let poses: Vec<PoseSE3> = (0..10)
            .map(|i| PoseSE3::from_axis_angle(Vector3::new(0.3, -0.2, 1.0), i as f64 * 0.37, Vector3::new(i as f64, 2.5, -1.0)))
            .collect();
        save_poses(&path, &poses).unwrap();
        for (a, b) in load_poses(&path).unwrap().iter().zip(&poses) {
            assert!((a.rotation - b.rotation).abs().max() < 1e-9);
            assert!((a.translation - b.translation).abs().max() < 1e-9);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let world = small_world();
        let traj = TrajectorySpec {
            count: 3,
            ..TrajectorySpec::default()
        };
        let scans = generate_traversal(&world, &traj, &ScanSpec::toy()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = Traversal::write(dir.path(), &scans, CloudLayout::Xyz).unwrap();
        let loaded = Traversal::load(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        let back = loaded.load_scans(CloudLayout::Xyz).unwrap();
        for (a, b) in back.iter().zip(&scans) {
            assert_eq!(a.cloud.len(), b.cloud.len());
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-9);
        }
        assert_eq!(written.entries[1].cloud_path, loaded.entries[1].cloud_path);
    }

    #[test]
    fn pair_pools() {
        let at = |x: f64| PoseSE3::from_yaw(0.0, Vector3::new(x, 0.0, 0.0));
        let pool = sample_pairs(&[at(0.0), at(1.0), at(11.0), at(6.0)], 2.0, 10.0).unwrap();
        assert!(pool.is_positive(0, 1));
        assert!(pool.is_negative(0, 2));
        assert!(!pool.is_positive(0, 3) && !pool.is_negative(0, 3));
        assert!(sample_pairs(&[at(0.0), at(5.0)], 2.0, 10.0).is_err());
    }
}
