//! Training objectives: batch-hard triplet loss on global descriptors and
//! the keypoint (probabilistic Chamfer, point-to-point) and local
//! descriptor (cross-entropy over cosine similarities) losses.

use nalgebra::{Point3, Vector3};
use ndarray::Array2;

use crate::geometry::PoseSE3;
use crate::sparse_ad::ops;
use crate::sparse_ad::{Mat, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub temperature: f64,
    pub lambda_chamfer: f64,
    pub lambda_p2p: f64,
    pub lambda_descriptor: f64,
    /// Clouds at most this far apart (meters) are positives.
    pub positive_dist: f64,
    /// Clouds farther apart than this (meters) are negatives.
    pub negative_dist: f64,
    /// Ground-truth keypoint correspondence radius, meters.
    pub corr_radius: f64,
}

impl LossConfig {
    pub fn full() -> Self {
        Self {
            margin: 0.2,
            temperature: 0.02,
            lambda_chamfer: 1.0,
            lambda_p2p: 1.0,
            lambda_descriptor: 1.0,
            positive_dist: 2.0,
            negative_dist: 10.0,
            corr_radius: 2.0,
        }
    }

    pub fn toy() -> Self {
        Self {
            corr_radius: 0.5,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let positive = [
            self.margin,
            self.temperature,
            self.positive_dist,
            self.negative_dist,
            self.corr_radius,
        ];
        let weights = [self.lambda_chamfer, self.lambda_p2p, self.lambda_descriptor];
        if positive.iter().any(|v| !(*v > 0.0)) || weights.iter().any(|v| !(*v >= 0.0)) {
            return Err(crate::Error::Config("loss parameters must be positive".into()));
        }
        if self.positive_dist >= self.negative_dist {
            return Err(crate::Error::Config("positive_dist must be below negative_dist".into()));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Positive / negative masks from pose translations. The diagonal is never positive.
pub fn pose_masks(positions: &[Vector3<f64>], cfg: &LossConfig) -> (Vec<Vec<bool>>, Vec<Vec<bool>>) {
    let n = positions.len();
    let mut pos = vec![vec![false; n]; n];
    let mut neg = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            let d = (positions[i] - positions[j]).norm();
            pos[i][j] = i != j && d <= cfg.positive_dist;
            neg[i][j] = d > cfg.negative_dist;
        }
    }
    (pos, neg)
}

fn row_dist(emb: &Mat, i: usize, j: usize) -> f64 {
    let d = &emb.row(i) - &emb.row(j);
    d.dot(&d).sqrt()
}

/// Hardest positive (farthest) and hardest negative (nearest) per anchor.
/// Anchors without a positive or without a negative are skipped; ties go to
/// the lower index.
pub fn mine_batch_hard(emb: &Mat, pos_mask: &[Vec<bool>], neg_mask: &[Vec<bool>]) -> Vec<TripletIndex> {
    let b = emb.nrows();
    let mut out = Vec::new();
    for a in 0..b {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = row_dist(emb, a, j);
            if pos_mask[a][j] && hardest_pos.is_none_or(|(_, best)| d > best) {
                hardest_pos = Some((j, d));
            }
            if neg_mask[a][j] && hardest_neg.is_none_or(|(_, best)| d < best) {
                hardest_neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((n, _))) = (hardest_pos, hardest_neg) {
            out.push(TripletIndex {
                anchor: a,
                positive: p,
                negative: n,
            });
        }
    }
    out
}

/// `max(‖a − p‖ − ‖a − n‖ + m, 0)`.
pub fn triplet_value(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    (dist(a, p) - dist(a, n) + margin).max(0.0)
}

/// Mean triplet margin loss over `triplets` of rows of `emb`.
pub fn triplet_loss(tape: &mut Tape, emb: NodeId, triplets: &[TripletIndex], margin: f64) -> NodeId {
    assert!(!triplets.is_empty(), "triplet loss needs at least one triplet");
    let ev = tape.value(emb);
    let count = triplets.len() as f64;
    let value = triplets
        .iter()
        .map(|t| {
            triplet_value(
                ev.row(t.anchor).as_slice().expect("contiguous"),
                ev.row(t.positive).as_slice().expect("contiguous"),
                ev.row(t.negative).as_slice().expect("contiguous"),
                margin,
            )
        })
        .sum::<f64>()
        / count;
    let triplets = triplets.to_vec();
    tape.op(
        Mat::from_elem((1, 1), value),
        vec![emb],
        Box::new(move |g, p, _| {
            let ev = p[0];
            let scale = g[[0, 0]] / count;
            let mut ge = Mat::zeros(ev.dim());
            for t in &triplets {
                let ap = &ev.row(t.anchor) - &ev.row(t.positive);
                let an = &ev.row(t.anchor) - &ev.row(t.negative);
                let dp = ap.dot(&ap).sqrt();
                let dn = an.dot(&an).sqrt();
                if dp - dn + margin <= 0.0 {
                    continue;
                }
                let up = if dp > 0.0 { ap / dp } else { ap * 0.0 };
                let un = if dn > 0.0 { an / dn } else { an * 0.0 };
                let mut ga = ge.row_mut(t.anchor);
                ga.scaled_add(scale, &up);
                ga.scaled_add(-scale, &un);
                ge.row_mut(t.positive).scaled_add(-scale, &up);
                ge.row_mut(t.negative).scaled_add(scale, &un);
            }
            vec![Some(ge)]
        }),
    )
}

fn sq_dist_rows(a: &Mat, i: usize, b: &Mat, j: usize) -> f64 {
    (0..a.ncols()).map(|k| (a[[i, k]] - b[[j, k]]).powi(2)).sum()
}

/// Index of the nearest row of `b` for every row of `a` (ties → lowest index).
pub fn nearest_rows(a: &Mat, b: &Mat) -> Vec<(usize, f64)> {
    (0..a.nrows())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for j in 0..b.nrows() {
                let d = sq_dist_rows(a, i, b, j);
                if d < best.1 {
                    best = (j, d);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect()
}

/// Probabilistic Chamfer loss between keypoints `qa` and keypoints `qb`
/// already expressed in a's frame, with saliency uncertainties `sa`, `sb`
/// (column vectors):
/// `Σᵢ ln sᵢ + dᵢ/sᵢ + Σⱼ ln s'ⱼ + d'ⱼ/s'ⱼ` with `s` the mean uncertainty of
/// the matched pair.
pub fn chamfer_loss(tape: &mut Tape, qa: NodeId, qb: NodeId, sa: NodeId, sb: NodeId) -> NodeId {
    let (qav, qbv) = (tape.value(qa), tape.value(qb));
    assert!(qav.nrows() > 0 && qbv.nrows() > 0, "chamfer loss needs non-empty keypoint sets");
    let nn_ab = nearest_rows(qav, qbv);
    let nn_ba = nearest_rows(qbv, qav);
    let (sav, sbv) = (tape.value(sa), tape.value(sb));
    let term = |s: f64, d: f64| s.ln() + d / s;
    let value: f64 = nn_ab
        .iter()
        .enumerate()
        .map(|(i, &(j, d))| term(0.5 * (sav[[i, 0]] + sbv[[j, 0]]), d))
        .chain(nn_ba.iter().enumerate().map(|(j, &(i, d))| term(0.5 * (sbv[[j, 0]] + sav[[i, 0]]), d)))
        .sum();
    tape.op(
        Mat::from_elem((1, 1), value),
        vec![qa, qb, sa, sb],
        Box::new(move |g, p, _| {
            let go = g[[0, 0]];
            let (qav, qbv, sav, sbv) = (p[0], p[1], p[2], p[3]);
            let mut gqa = Mat::zeros(qav.dim());
            let mut gqb = Mat::zeros(qbv.dim());
            let mut gsa = Mat::zeros(sav.dim());
            let mut gsb = Mat::zeros(sbv.dim());
            // (row in x, row in y, distance), x/y = (a, b) or (b, a)
            let mut accumulate = |from_a: bool, i: usize, j: usize, d: f64| {
                let (si, sj) = if from_a { (sav[[i, 0]], sbv[[j, 0]]) } else { (sbv[[i, 0]], sav[[j, 0]]) };
                let s = 0.5 * (si + sj);
                let dl_ds = 1.0 / s - d / (s * s);
                let dl_dd = 1.0 / s;
                let (gs_i, gs_j) = if from_a { (&mut gsa, &mut gsb) } else { (&mut gsb, &mut gsa) };
                gs_i[[i, 0]] += go * 0.5 * dl_ds;
                gs_j[[j, 0]] += go * 0.5 * dl_ds;
                if d > 0.0 {
                    let (x, y) = if from_a { (qav, qbv) } else { (qbv, qav) };
                    for k in 0..3 {
                        let u = go * dl_dd * (x[[i, k]] - y[[j, k]]) / d;
                        if from_a {
                            gqa[[i, k]] += u;
                            gqb[[j, k]] -= u;
                        } else {
                            gqb[[i, k]] += u;
                            gqa[[j, k]] -= u;
                        }
                    }
                }
            };
            for (i, &(j, d)) in nn_ab.iter().enumerate() {
                accumulate(true, i, j, d);
            }
            for (j, &(i, d)) in nn_ba.iter().enumerate() {
                accumulate(false, j, i, d);
            }
            vec![Some(gqa), Some(gqb), Some(gsa), Some(gsb)]
        }),
    )
}

/// Nearest input point for each keypoint, by exhaustive scan.
pub fn nearest_points(q: &Mat, cloud: &[Point3<f64>]) -> Vec<(usize, f64)> {
    (0..q.nrows())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for (j, p) in cloud.iter().enumerate() {
                let d = (q[[i, 0]] - p.x).powi(2) + (q[[i, 1]] - p.y).powi(2) + (q[[i, 2]] - p.z).powi(2);
                if d < best.1 {
                    best = (j, d);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect()
}

/// `Σᵢ min_p ‖qᵢ − p‖` of keypoints against their own input cloud. The
/// symmetric pair loss is the sum of this term for both clouds.
pub fn p2p_loss(tape: &mut Tape, q: NodeId, cloud: &[Point3<f64>]) -> NodeId {
    assert!(!cloud.is_empty(), "point-to-point loss needs a non-empty cloud");
    let nn = nearest_points(tape.value(q), cloud);
    let value = nn.iter().map(|(_, d)| d).sum::<f64>();
    let targets: Vec<(Point3<f64>, f64)> = nn.iter().map(|&(j, d)| (cloud[j], d)).collect();
    tape.op(
        Mat::from_elem((1, 1), value),
        vec![q],
        Box::new(move |g, p, _| {
            let qv = p[0];
            let mut gq = Mat::zeros(qv.dim());
            for (i, (t, d)) in targets.iter().enumerate() {
                if *d > 0.0 {
                    for k in 0..3 {
                        gq[[i, k]] = g[[0, 0]] * (qv[[i, k]] - t[k]) / d;
                    }
                }
            }
            vec![Some(gq)]
        }),
    )
}

/// Ground-truth keypoint correspondences: rows of a whose nearest
/// b-keypoint, after bringing b into a's frame, lies within the radius.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Correspondences {
    pub rows: Vec<usize>,
    pub nn: Vec<usize>,
}

impl Correspondences {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// `b_to_a` maps b-frame points into a's frame.
pub fn gt_correspondences(qa: &Mat, qb: &Mat, b_to_a: &PoseSE3, radius: f64) -> Correspondences {
    let qb_in_a = transform_rows(qb, b_to_a);
    let mut out = Correspondences::default();
    if qb_in_a.nrows() == 0 {
        return out;
    }
    for (i, (j, d)) in nearest_rows(qa, &qb_in_a).into_iter().enumerate() {
        if d <= radius {
            out.rows.push(i);
            out.nn.push(j);
        }
    }
    out
}

pub fn transform_rows(q: &Mat, pose: &PoseSE3) -> Mat {
    let mut out = q.clone();
    for mut row in out.rows_mut() {
        let p = pose.apply_point(&Point3::new(row[0], row[1], row[2]));
        row[0] = p.x;
        row[1] = p.y;
        row[2] = p.z;
    }
    out
}

/// Cross-entropy of the temperature-scaled similarity rows against the
/// ground-truth column `gt[i]`, averaged over rows.
pub fn descriptor_value(c: &Mat, gt: &[usize], tau: f64) -> f64 {
    let (probs, value) = softmax_ce(c, gt, tau);
    drop(probs);
    value
}

fn softmax_ce(c: &Mat, gt: &[usize], tau: f64) -> (Mat, f64) {
    assert_eq!(c.nrows(), gt.len());
    assert!(c.nrows() > 0, "descriptor loss needs at least one correspondence");
    let mut probs = Mat::zeros(c.dim());
    let mut total = 0.0;
    for (i, row) in c.rows().into_iter().enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v / tau));
        let exps: Vec<f64> = row.iter().map(|v| (v / tau - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            probs[[i, j]] = e / z;
        }
        total += -(row[gt[i]] / tau - max - z.ln());
    }
    (probs, total / c.nrows() as f64)
}

pub fn descriptor_loss(tape: &mut Tape, c: NodeId, gt: &[usize], tau: f64) -> NodeId {
    let (probs, value) = softmax_ce(tape.value(c), gt, tau);
    let gt = gt.to_vec();
    tape.op(
        Mat::from_elem((1, 1), value),
        vec![c],
        Box::new(move |g, _, _| {
            let mut gc = probs.clone();
            for (i, &j) in gt.iter().enumerate() {
                gc[[i, j]] -= 1.0;
            }
            gc *= g[[0, 0]] / (tau * gt.len() as f64);
            vec![Some(gc)]
        }),
    )
}

/// Cosine-similarity matrix `D_a[rows] · D_bᵀ` (descriptor rows are unit).
pub fn correspondence_matrix(tape: &mut Tape, da: NodeId, db: NodeId, rows: &[usize]) -> NodeId {
    let filtered = ops::gather_rows(tape, da, rows.to_vec());
    ops::matmul_nt(tape, filtered, db)
}

/// Scalar components of the local loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LocalLossParts {
    pub chamfer: f64,
    pub p2p: f64,
    pub descriptor: Option<f64>,
}

/// `λ_C L_C + λ_P2P L_P2P + λ_D L_D`; a missing descriptor term is dropped.
pub fn total_local_loss(
    tape: &mut Tape,
    chamfer: NodeId,
    p2p: NodeId,
    descriptor: Option<NodeId>,
    cfg: &LossConfig,
) -> NodeId {
    let mut terms = vec![(chamfer, cfg.lambda_chamfer), (p2p, cfg.lambda_p2p)];
    if let Some(d) = descriptor {
        terms.push((d, cfg.lambda_descriptor));
    }
    ops::weighted_sum(tape, &terms)
}

/// Column vector helper.
pub fn column(values: &[f64]) -> Mat {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_of(build: impl FnOnce(&mut Tape) -> NodeId) -> f64 {
        let mut tape = Tape::new();
        let n = build(&mut tape);
        tape.scalar(n)
    }

    #[test]
    fn triplet_values() {
        let m = 0.2;
        assert!((triplet_value(&[0.0], &[0.0], &[0.0], m) - 0.2).abs() < 1e-15);
        assert_eq!(triplet_value(&[0.0], &[0.5], &[0.9], m), 0.0);
        assert!((triplet_value(&[0.0], &[0.5], &[0.6], m) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mining_single_choice_and_skips() {
        let emb = array![[0.0, 0.0], [0.1, 0.0], [5.0, 0.0]];
        let pos = vec![vec![false, true, false], vec![true, false, false], vec![false; 3]];
        let neg = vec![vec![false, false, true], vec![false; 3], vec![true, false, false]];
        let t = mine_batch_hard(&emb, &pos, &neg);
        assert_eq!(t, vec![TripletIndex { anchor: 0, positive: 1, negative: 2 }]);
        assert!(mine_batch_hard(&emb, &[vec![false; 3], vec![false; 3], vec![false; 3]], &neg).is_empty());
    }

    #[test]
    fn chamfer_examples() {
        let v = scalar_of(|t| {
            let qa = t.leaf(array![[1.0, 2.0, 3.0]]);
            let qb = t.leaf(array![[1.0, 2.0, 3.0]]);
            let sa = t.leaf(column(&[0.5]));
            let sb = t.leaf(column(&[1.5]));
            chamfer_loss(t, qa, qb, sa, sb)
        });
        assert!((v - 2.0 * 1f64.ln()).abs() < 1e-12);
        let v = scalar_of(|t| {
            let qa = t.leaf(array![[0.0, 0.0, 0.0]]);
            let qb = t.leaf(array![[2.0, 0.0, 0.0]]);
            let sa = t.leaf(column(&[2.0]));
            let sb = t.leaf(column(&[2.0]));
            chamfer_loss(t, qa, qb, sa, sb)
        });
        assert!((v - 2.0 * (2f64.ln() + 1.0)).abs() < 1e-12);
        assert!((v - 3.386).abs() < 1e-3);
    }

    #[test]
    fn chamfer_uncertainty_stationary_at_distance() {
        // one pair at distance 1.3 with both sigmas 1.3: d L / d sigma = 0
        let mut tape = Tape::new();
        let qa = tape.constant(array![[0.0, 0.0, 0.0]]);
        let qb = tape.constant(array![[1.3, 0.0, 0.0]]);
        let sa = tape.leaf(column(&[1.3]));
        let sb = tape.leaf(column(&[1.3]));
        let l = chamfer_loss(&mut tape, qa, qb, sa, sb);
        let g = tape.backward(l);
        assert!(g.get(sa).unwrap()[[0, 0]].abs() < 1e-12);
        assert!(g.get(sb).unwrap()[[0, 0]].abs() < 1e-12);
    }

    #[test]
    fn p2p_examples() {
        let cloud = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(3.0, 0.0, 0.0)];
        let v = scalar_of(|t| {
            let q = t.leaf(array![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
            p2p_loss(t, q, &cloud)
        });
        assert_eq!(v, 0.0);
        let v = scalar_of(|t| {
            let q = t.leaf(array![[3.0, 0.7, 0.0]]);
            p2p_loss(t, q, &cloud)
        });
        assert!((v - 0.7).abs() < 1e-12);
    }

    #[test]
    fn correspondence_examples() {
        let qa = array![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 7.0, 1.0]];
        let c = gt_correspondences(&qa, &qa, &PoseSE3::identity(), 0.5);
        assert_eq!(c.rows, vec![0, 1, 2]);
        assert_eq!(c.nn, vec![0, 1, 2]);
        let far = &qa + 10.0;
        assert!(gt_correspondences(&qa, &far, &PoseSE3::identity(), 0.5).is_empty());
    }

    #[test]
    fn descriptor_loss_examples() {
        let uniform = Mat::from_elem((3, 7), 0.3);
        let v = descriptor_value(&uniform, &[0, 3, 6], 0.02);
        assert!((v - 7f64.ln()).abs() < 1e-12);

        let mut c = Mat::zeros((1, 128));
        c[[0, 5]] = 1.0;
        let v = descriptor_value(&c, &[5], 0.02);
        let expected = (1.0 + 127.0 * (-50f64).exp()).ln();
        assert!((v - expected).abs() < 1e-15);
        assert!(v < 1e-12);
    }

    #[test]
    fn total_loss_weights() {
        let cfg = LossConfig::full();
        let v = scalar_of(|t| {
            let (a, b, c) = (t.leaf(array![[1.0]]), t.leaf(array![[2.0]]), t.leaf(array![[3.0]]));
            total_local_loss(t, a, b, Some(c), &cfg)
        });
        assert_eq!(v, 6.0);
        let cfg0 = LossConfig { lambda_descriptor: 0.0, ..cfg };
        let v = scalar_of(|t| {
            let (a, b, c) = (t.leaf(array![[1.0]]), t.leaf(array![[2.0]]), t.leaf(array![[3.0]]));
            total_local_loss(t, a, b, Some(c), &cfg0)
        });
        assert_eq!(v, 3.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::full().validate().is_ok());
        let bad = LossConfig { positive_dist: 20.0, ..LossConfig::full() };
        assert!(bad.validate().is_err());
    }
}
