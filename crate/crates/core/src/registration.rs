//! Descriptor matching, RANSAC rigid registration, point-to-point ICP and
//! pose error metrics.

use nalgebra::{Matrix3, Point3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::geometry::{rotation_angle, PointCloud, PoseSE3};
use crate::model::{select_keypoints, KeypointSet};
use crate::sparse_ad::Mat;

/// Success thresholds of a pose estimate.
pub const SUCCESS_RTE: f64 = 2.0;
pub const SUCCESS_RRE_DEG: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn best_in_row(sim: &Mat, i: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, &s) in sim.row(i).iter().enumerate() {
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

/// Matches every row of `da` to its highest-cosine row of `db` (ties go to
/// the lower index). With `mutual`, only reciprocal best pairs are kept.
pub fn match_descriptors(da: &Mat, db: &Mat, mutual: bool) -> MatchSet {
    if da.nrows() == 0 || db.nrows() == 0 {
        return MatchSet::default();
    }
    let sim = da.dot(&db.t());
    let back: Vec<usize> = if mutual {
        let simt = sim.t().to_owned();
        (0..db.nrows()).map(|j| best_in_row(&simt, j).0).collect()
    } else {
        Vec::new()
    };
    let pairs = (0..da.nrows())
        .filter_map(|i| {
            let (j, s) = best_in_row(&sim, i);
            (!mutual || back[j] == i).then_some(Match {
                a: i,
                b: j,
                score: s.clamp(-1.0, 1.0),
            })
        })
        .collect();
    MatchSet { pairs }
}

/// Relative singular-value floor below which a point set counts as collinear.
const DEGENERACY_RATIO: f64 = 1e-8;

fn centroid(points: &[Point3<f64>]) -> Vector3<f64> {
    points.iter().map(|p| p.coords).sum::<Vector3<f64>>() / points.len() as f64
}

fn is_degenerate(points: &[Point3<f64>], c: &Vector3<f64>) -> bool {
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p.coords - c;
        scatter += d * d.transpose();
    }
    let sv = scatter.symmetric_eigenvalues();
    let mut s: Vec<f64> = sv.iter().map(|v| v.abs()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s[0] <= 1e-18 || s[1] <= DEGENERACY_RATIO * s[0]
}

/// Least-squares rigid transform with `T · a_i ≈ b_i`. `None` for fewer
/// than three pairs or collinear configurations.
pub fn kabsch(a: &[Point3<f64>], b: &[Point3<f64>]) -> Option<PoseSE3> {
    assert_eq!(a.len(), b.len());
    if a.len() < 3 {
        return None;
    }
    let (ca, cb) = (centroid(a), centroid(b));
    if is_degenerate(a, &ca) || is_degenerate(b, &cb) {
        return None;
    }
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += (p.coords - ca) * (q.coords - cb).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * fix * u.transpose();
    let t = cb - r * ca;
    Some(PoseSE3 { rotation: r, translation: t })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub max_iters: usize,
    pub inlier_radius: f64,
    pub min_inliers: usize,
    /// Probability of drawing at least one all-inlier sample, for early stop.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            inlier_radius: 0.5,
            min_inliers: 6,
            confidence: 0.999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegistrationFailure {
    TooFewMatches,
    TooFewInliers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    /// Maps a's frame into b's frame. Identity on failure.
    pub pose: PoseSE3,
    /// Indices into the match list.
    pub inliers: Vec<usize>,
    pub iterations: usize,
    pub failure: Option<RegistrationFailure>,
}

impl RansacOutcome {
    pub fn success(&self) -> bool {
        self.failure.is_none()
    }
}

fn inliers_of(pose: &PoseSE3, a: &[Point3<f64>], b: &[Point3<f64>], radius: f64) -> Vec<usize> {
    (0..a.len())
        .filter(|&i| (pose.apply_point(&a[i]) - b[i]).norm() <= radius)
        .collect()
}

/// Iterations needed to draw an all-inlier 3-sample with `confidence`.
fn adaptive_bound(inlier_ratio: f64, confidence: f64, max_iters: usize) -> usize {
    let w3 = inlier_ratio.powi(3);
    if w3 >= 1.0 {
        return 1;
    }
    if w3 <= 0.0 {
        return max_iters;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w3).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, max_iters)
    } else {
        max_iters
    }
}

/// Iterations evaluated between adaptive stopping checks.
const RANSAC_CHUNK: usize = 64;

/// RANSAC over matched positions `qa[m.a] ↔ qb[m.b]`. Iteration `i` draws
/// its sample from its own stream of the seeded generator, so the result
/// does not depend on how iterations are scheduled.
pub fn ransac_register(matches: &MatchSet, qa: &[Point3<f64>], qb: &[Point3<f64>], cfg: &RansacConfig) -> RansacOutcome {
    let a: Vec<Point3<f64>> = matches.pairs.iter().map(|m| qa[m.a]).collect();
    let b: Vec<Point3<f64>> = matches.pairs.iter().map(|m| qb[m.b]).collect();
    let n = a.len();
    let fail = |failure, iterations| RansacOutcome {
        pose: PoseSE3::identity(),
        inliers: Vec::new(),
        iterations,
        failure: Some(failure),
    };
    if n < 3 {
        return fail(RegistrationFailure::TooFewMatches, 0);
    }
    let max_iters = cfg.max_iters.max(1);
    let mut best: Option<(usize, usize, PoseSE3)> = None; // (count, iteration, pose)
    let mut bound = max_iters;
    let mut done = 0;
    while done < bound.min(max_iters) {
        let end = (done + RANSAC_CHUNK).min(max_iters);
        let chunk_best = (done..end)
            .into_par_iter()
            .filter_map(|it| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(it as u64);
                let idx = sample(&mut rng, n, 3);
                let sa: Vec<Point3<f64>> = idx.iter().map(|i| a[i]).collect();
                let sb: Vec<Point3<f64>> = idx.iter().map(|i| b[i]).collect();
                let pose = kabsch(&sa, &sb)?;
                let count = inliers_of(&pose, &a, &b, cfg.inlier_radius).len();
                Some((count, it, pose))
            })
            .reduce_with(|x, y| if y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) { y } else { x });
        if let Some(c) = chunk_best {
            if best.as_ref().is_none_or(|b| c.0 > b.0) {
                best = Some(c);
            }
        }
        done = end;
        if let Some((count, _, _)) = &best {
            bound = adaptive_bound(*count as f64 / n as f64, cfg.confidence, max_iters);
        }
    }
    let Some((_, _, mut pose)) = best else {
        return fail(RegistrationFailure::TooFewInliers, done);
    };
    let mut inliers = inliers_of(&pose, &a, &b, cfg.inlier_radius);
    // refit on the consensus set until it stops growing
    for _ in 0..3 {
        let fa: Vec<Point3<f64>> = inliers.iter().map(|&i| a[i]).collect();
        let fb: Vec<Point3<f64>> = inliers.iter().map(|&i| b[i]).collect();
        let Some(refit) = kabsch(&fa, &fb) else { break };
        let next = inliers_of(&refit, &a, &b, cfg.inlier_radius);
        if next.len() < inliers.len() {
            break;
        }
        let stable = next == inliers;
        pose = refit;
        inliers = next;
        if stable {
            break;
        }
    }
    if inliers.len() < cfg.min_inliers {
        return RansacOutcome {
            pose,
            inliers,
            iterations: done,
            failure: Some(RegistrationFailure::TooFewInliers),
        };
    }
    RansacOutcome {
        pose,
        inliers,
        iterations: done,
        failure: None,
    }
}

/// Registers keypoints of `a` onto `b`: selects the `k` most salient of
/// each, matches descriptors and runs RANSAC. The pose maps a into b.
pub fn register_keypoints(ka: &KeypointSet, kb: &KeypointSet, k: usize, mutual: bool, cfg: &RansacConfig) -> RansacOutcome {
    let (sa, sb) = (select_keypoints(ka, k), select_keypoints(kb, k));
    register_selected(&sa, &sb, mutual, cfg)
}

/// Registration on keypoint sets that are already selected.
pub fn register_selected(sa: &KeypointSet, sb: &KeypointSet, mutual: bool, cfg: &RansacConfig) -> RansacOutcome {
    let matches = match_descriptors(&sa.descriptors, &sb.descriptors, mutual);
    ransac_register(&matches, &sa.positions, &sb.positions, cfg)
}

/// Uniform-grid spatial hash answering exact nearest-neighbor queries.
pub struct GridIndex {
    cell: f64,
    cells: FxHashMap<(i32, i32, i32), Vec<usize>>,
    points: Vec<Point3<f64>>,
    lo: [i32; 3],
    hi: [i32; 3],
}

impl GridIndex {
    pub fn new(points: &[Point3<f64>], cell: f64) -> Self {
        let mut cells: FxHashMap<(i32, i32, i32), Vec<usize>> = FxHashMap::default();
        let (mut lo, mut hi) = ([i32::MAX; 3], [i32::MIN; 3]);
        for (i, p) in points.iter().enumerate() {
            let k = Self::key(p, cell);
            for (d, v) in [k.0, k.1, k.2].into_iter().enumerate() {
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
            cells.entry(k).or_default().push(i);
        }
        Self {
            cell,
            cells,
            points: points.to_vec(),
            lo,
            hi,
        }
    }

    fn key(p: &Point3<f64>, cell: f64) -> (i32, i32, i32) {
        (
            (p.x / cell).floor() as i32,
            (p.y / cell).floor() as i32,
            (p.z / cell).floor() as i32,
        )
    }

    /// Nearest stored point as `(index, distance)`; ties go to the lower index.
    pub fn nearest(&self, p: &Point3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let c = Self::key(p, self.cell);
        let c = [c.0, c.1, c.2];
        let max_shell = (0..3)
            .map(|d| (c[d] - self.lo[d]).abs().max((self.hi[d] - c[d]).abs()))
            .max()
            .unwrap_or(0);
        let mut best: Option<(usize, f64)> = None;
        for r in 0..=max_shell {
            // every point outside shell r - 1 is at least (r - 1) cells away
            if let Some((_, d)) = best {
                if d <= (r - 1).max(0) as f64 * self.cell {
                    break;
                }
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let Some(list) = self.cells.get(&(c[0] + dx, c[1] + dy, c[2] + dz)) else {
                            continue;
                        };
                        for &i in list {
                            let d = (self.points[i] - p).norm();
                            if best.is_none_or(|(bi, bd)| d < bd || (d == bd && i < bi)) {
                                best = Some((i, d));
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Cell size of the ICP spatial hash, meters.
pub const ICP_CELL: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source into target.
    pub pose: PoseSE3,
    pub iterations: usize,
    pub mean_residual: f64,
}

/// Point-to-point ICP aligning `source` onto `target` from `init`.
pub fn icp_p2p(source: &PointCloud, target: &PointCloud, init: &PoseSE3, max_iters: usize, tol: f64) -> IcpResult {
    let index = GridIndex::new(&target.points, ICP_CELL);
    let mut pose = init.clone();
    let mut prev = f64::INFINITY;
    let mut mean_residual = f64::INFINITY;
    let mut iterations = 0;
    if source.is_empty() || target.is_empty() {
        return IcpResult {
            pose,
            iterations,
            mean_residual,
        };
    }
    for _ in 0..max_iters {
        iterations += 1;
        let moved: Vec<Point3<f64>> = source.iter().map(|p| pose.apply_point(p)).collect();
        let nn: Vec<(usize, f64)> = moved
            .par_iter()
            .map(|p| index.nearest(p).expect("target is non-empty"))
            .collect();
        mean_residual = nn.iter().map(|(_, d)| d).sum::<f64>() / nn.len() as f64;
        let matched: Vec<Point3<f64>> = nn.iter().map(|(j, _)| target.points[*j]).collect();
        let Some(step) = kabsch(&moved, &matched) else { break };
        pose = step.compose(&pose);
        if (prev - mean_residual).abs() < tol {
            break;
        }
        prev = mean_residual;
    }
    IcpResult {
        pose,
        iterations,
        mean_residual,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseErrors {
    pub rte: f64,
    pub rre: f64,
    pub success: bool,
}

/// Errors of `est` against `gt` through `ΔT = gt⁻¹ ∘ est`.
pub fn pose_errors(est: &PoseSE3, gt: &PoseSE3) -> PoseErrors {
    let delta = gt.inverse().compose(est);
    let rte = delta.translation.norm();
    let rre = rotation_angle(&delta.rotation).to_degrees();
    PoseErrors {
        rte,
        rre,
        success: rte <= SUCCESS_RTE && rre <= SUCCESS_RRE_DEG,
    }
}
