//! Finite-difference gradient suite over every tape primitive, every loss
//! and the assembled network.

use std::sync::Arc;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{CylPoint, PointCloud, PoseSE3, QuantizationSpec, VoxelCoord};
use crate::losses::{self, LossConfig};
use crate::model::keypoints::{decode_keypoints_op, SupervoxelGrid};
use crate::model::{Branches, EgoNN, NetConfig};
use crate::sparse_ad::layers::{self, NormMode, RunningStats, SparseTensor};
use crate::sparse_ad::{grad_check, ops, Activation, CoordSet, GradCheckConfig, Group, Mat, NodeId, ParamStore, Parameter, Tape};
use crate::trainer::local_loss_graph;

/// Bound on the relative error of a single primitive.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
/// Bound for losses and the whole network.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    Primitive,
    Loss,
    Network,
}

impl CaseKind {
    pub fn tolerance(self) -> f64 {
        match self {
            CaseKind::Primitive => PRIMITIVE_TOLERANCE,
            CaseKind::Loss | CaseKind::Network => END_TO_END_TOLERANCE,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CaseKind::Primitive => "primitive",
            CaseKind::Loss => "loss",
            CaseKind::Network => "network",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub kind: CaseKind,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.kind.tolerance()
    }
}

pub const GRADCHECK_CSV_HEADER: &str = "case,kind,max_rel_err,checked,tolerance,passed";

pub fn results_csv(results: &[CaseResult]) -> String {
    let mut s = format!("{GRADCHECK_CSV_HEADER}\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{:.3e},{},{:e},{}\n",
            r.name,
            r.kind.label(),
            r.max_rel_err,
            r.checked,
            r.kind.tolerance(),
            r.passed()
        ));
    }
    s
}

struct Fixture {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        }
    }

    fn uniform(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| self.rng.random_range(lo..hi))
    }

    fn param(&mut self, name: &str, values: Mat) -> crate::sparse_ad::ParamId {
        let shape = vec![values.nrows(), values.ncols()];
        self.store.add(Parameter::new(name, shape, values, Group::Trunk))
    }

    fn random_param(&mut self, name: &str, rows: usize, cols: usize) -> crate::sparse_ad::ParamId {
        let v = self.uniform(rows, cols, -1.0, 1.0);
        self.param(name, v)
    }

    /// Sparse set in a 6 × 8 × 5 box, two batch elements, 8 wrapped θ bins.
    fn coords(&mut self, per_batch: usize) -> Arc<CoordSet> {
        let mut v = Vec::new();
        for b in 0..2u32 {
            for _ in 0..per_batch {
                v.push(VoxelCoord::new(
                    b,
                    self.rng.random_range(0..6),
                    self.rng.random_range(0..8),
                    self.rng.random_range(-2..3),
                ));
            }
        }
        Arc::new(CoordSet::from_voxels(v, 8, true, 2))
    }
}

/// Fixed random linear functional, turning any node into a scalar.
fn probe(tape: &mut Tape, x: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let xv = tape.value(x);
    let w = Mat::from_shape_fn(xv.dim(), |_| rng.random_range(-1.0..1.0));
    let value = (xv * &w).sum();
    tape.op(
        Mat::from_elem((1, 1), value),
        vec![x],
        Box::new(move |g, _, _| vec![Some(&w * g[[0, 0]])]),
    )
}

fn run<F>(name: &'static str, kind: CaseKind, fx: &Fixture, cfg: &GradCheckConfig, build: F) -> Result<CaseResult>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let report = grad_check(build, &fx.store, cfg)?;
    Ok(CaseResult {
        name,
        kind,
        max_rel_err: report.max_rel_err,
        checked: report.checked,
    })
}

fn activation_case(name: &'static str, kind: Activation, seed: u64, cfg: &GradCheckConfig) -> Result<CaseResult> {
    let mut fx = Fixture::new(seed);
    let x = fx.random_param("x", 7, 5);
    run(name, CaseKind::Primitive, &fx, cfg, move |t, s| {
        let xn = t.param(s, x);
        let y = ops::activation(t, xn, kind);
        Ok(probe(t, y, seed))
    })
}

/// Runs every case. `seed` fixes the random inputs and the sampled coordinates.
pub fn gradient_suite(seed: u64) -> Result<Vec<CaseResult>> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let mut out = vec![
        activation_case("relu", Activation::Relu, seed, &cfg)?,
        activation_case("tanh", Activation::Tanh, seed, &cfg)?,
        activation_case("softplus", Activation::Softplus, seed, &cfg)?,
        activation_case("sigmoid", Activation::Sigmoid, seed, &cfg)?,
        activation_case("l2_norm_rows", Activation::L2NormRows, seed, &cfg)?,
    ];
    out.extend(dense_cases(seed, &cfg)?);
    out.extend(sparse_cases(seed, &cfg)?);
    out.extend(loss_cases(seed, &cfg)?);
    out.push(network_case(seed, &cfg)?);
    Ok(out)
}

fn dense_cases(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    let mut fx = Fixture::new(seed);
    let (a, b) = (fx.random_param("a", 6, 4), fx.random_param("b", 6, 4));
    out.push(run("add", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let (an, bn) = (t.param(s, a), t.param(s, b));
        let y = ops::add(t, an, bn);
        Ok(probe(t, y, seed))
    })?);
    out.push(run("add_scalar", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let an = t.param(s, a);
        let y = ops::add_scalar(t, an, 0.7);
        Ok(probe(t, y, seed))
    })?);
    out.push(run("weighted_sum", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let (an, bn) = (t.param(s, a), t.param(s, b));
        let (pa, pb) = (probe(t, an, seed), probe(t, bn, seed + 1));
        Ok(ops::weighted_sum(t, &[(pa, 0.3), (pb, -1.7)]))
    })?);
    out.push(run("sum_all", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let an = t.param(s, a);
        let sq = ops::activation(t, an, Activation::Tanh);
        Ok(ops::sum_all(t, sq))
    })?);
    out.push(run("matmul_nt", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let (an, bn) = (t.param(s, a), t.param(s, b));
        let y = ops::matmul_nt(t, an, bn);
        Ok(probe(t, y, seed))
    })?);
    out.push(run("gather_rows", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let an = t.param(s, a);
        let y = ops::gather_rows(t, an, vec![5, 0, 2, 2, 5, 1]);
        Ok(probe(t, y, seed))
    })?);
    out.push(run("slice_cols", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let an = t.param(s, a);
        let y = ops::slice_cols(t, an, 1, 3);
        Ok(probe(t, y, seed))
    })?);

    let mut fx = Fixture::new(seed + 10);
    let (x, w, bias) = (fx.random_param("x", 9, 5), fx.random_param("w", 5, 3), fx.random_param("b", 1, 3));
    out.push(run("linear", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let (xn, wn, bn) = (t.param(s, x), t.param(s, w), t.param(s, bias));
        let y = ops::linear(t, xn, wn, Some(bn));
        Ok(probe(t, y, seed))
    })?);

    let mut fx = Fixture::new(seed + 20);
    let pts = fx.random_param("q", 8, 3);
    let pose = PoseSE3::from_axis_angle(Vector3::new(0.2, -0.4, 1.0), 0.9, Vector3::new(1.0, -2.0, 0.5));
    out.push(run("transform_points", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let q = t.param(s, pts);
        let y = ops::transform_points(t, q, &pose);
        Ok(probe(t, y, seed))
    })?);

    let mut fx = Fixture::new(seed + 30);
    let raw = fx.uniform(10, 3, -0.9, 0.9);
    let raw_id = fx.param("raw", raw);
    let grid = SupervoxelGrid::from_stride(&QuantizationSpec::toy(), [8, 8, 8]);
    let centers: Vec<CylPoint> = (0..10)
        .map(|i| grid.center([i % 4 + 1, (i * 3) % 12, i % 3 - 1]))
        .collect();
    out.push(run("decode_keypoints", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let r = t.param(s, raw_id);
        let y = decode_keypoints_op(t, r, grid, centers.clone());
        Ok(probe(t, y, seed))
    })?);
    Ok(out)
}

fn sparse_cases(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    let mut fx = Fixture::new(seed + 100);
    let coords = fx.coords(30);
    let n = coords.len();
    let x = fx.random_param("x", n, 3);
    let k3 = fx.random_param("k3", 27 * 3, 4);
    let kd = fx.random_param("kd", 8 * 3, 4);
    let ku = fx.random_param("ku", 8 * 4, 3);
    let (gamma, beta) = (fx.random_param("gamma", 1, 3), fx.random_param("beta", 1, 3));
    let eca_k = fx.random_param("eca", 1, 3);
    let tensor = move |t: &mut Tape, s: &ParamStore, c: &Arc<CoordSet>| {
        let f = t.param(s, x);
        SparseTensor::new(t, c.clone(), f)
    };

    let c = coords.clone();
    out.push(run("sparse_conv", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let xt = tensor(t, s, &c);
        let k = t.param(s, k3);
        let y = layers::sparse_conv(t, &xt, k, 3);
        Ok(probe(t, y.feats, seed))
    })?);
    let c = coords.clone();
    out.push(run("sparse_conv_down", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let xt = tensor(t, s, &c);
        let k = t.param(s, kd);
        let y = layers::sparse_conv_down(t, &xt, k, [2, 2, 2]);
        Ok(probe(t, y.feats, seed))
    })?);
    let c = coords.clone();
    out.push(run("sparse_tconv", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let xt = tensor(t, s, &c);
        let k = t.param(s, kd);
        let down = layers::sparse_conv_down(t, &xt, k, [2, 2, 2]);
        let kt = t.param(s, ku);
        let up = layers::sparse_tconv(t, &down, kt, c.clone(), [2, 2, 2]);
        Ok(probe(t, up.feats, seed))
    })?);
    let c = coords.clone();
    out.push(run("batch_norm_train", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let xt = tensor(t, s, &c);
        let (g, b) = (t.param(s, gamma), t.param(s, beta));
        let (y, _) = layers::batch_norm(t, &xt, g, b, NormMode::Train);
        Ok(probe(t, y.feats, seed))
    })?);
    let c = coords.clone();
    let stats = RunningStats {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.5, 0.9],
    };
    out.push(run("batch_norm_eval", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let xt = tensor(t, s, &c);
        let (g, b) = (t.param(s, gamma), t.param(s, beta));
        let (y, _) = layers::batch_norm(t, &xt, g, b, NormMode::Eval(&stats));
        Ok(probe(t, y.feats, seed))
    })?);
    let c = coords.clone();
    out.push(run("eca", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let xt = tensor(t, s, &c);
        let k = t.param(s, eca_k);
        let y = layers::eca(t, &xt, k);
        Ok(probe(t, y.feats, seed))
    })?);

    // GeM needs positive features and a positive exponent.
    let mut fx = Fixture::new(seed + 200);
    let feats = fx.uniform(n, 4, 0.1, 2.0);
    let xg = fx.param("x", feats);
    let p = fx.param("p", Mat::from_elem((1, 1), 2.5));
    let c = coords.clone();
    out.push(run("gem_pool", CaseKind::Primitive, &fx, cfg, move |t, s| {
        let f = t.param(s, xg);
        let xt = SparseTensor::new(t, c.clone(), f);
        let pn = t.param(s, p);
        let y = layers::gem_pool(t, &xt, pn)?;
        Ok(probe(t, y, seed))
    })?);
    Ok(out)
}

fn loss_cases(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();

    // Batch-hard triplet loss: two places, three clouds each, margin large
    // enough that every mined triplet is active.
    let mut fx = Fixture::new(seed + 300);
    let emb = fx.random_param("emb", 6, 8);
    let positions: Vec<Vector3<f64>> = (0..6)
        .map(|i| Vector3::new(if i < 3 { 0.0 } else { 50.0 }, i as f64 * 0.5, 0.0))
        .collect();
    let lc = LossConfig {
        margin: 10.0,
        ..LossConfig::toy()
    };
    let (pos, neg) = losses::pose_masks(&positions, &lc);
    let triplets = losses::mine_batch_hard(&fx.store.get(emb).values, &pos, &neg);
    out.push(run("triplet_loss", CaseKind::Loss, &fx, cfg, move |t, s| {
        let e = t.param(s, emb);
        Ok(losses::triplet_loss(t, e, &triplets, lc.margin))
    })?);

    let mut fx = Fixture::new(seed + 400);
    let qa = fx.uniform(12, 3, -3.0, 3.0);
    let qa_id = fx.param("qa", qa);
    let qb = fx.uniform(10, 3, -3.0, 3.0);
    let qb_id = fx.param("qb", qb);
    let sa = fx.uniform(12, 1, 0.3, 1.5);
    let sa_id = fx.param("sa", sa);
    let sb = fx.uniform(10, 1, 0.3, 1.5);
    let sb_id = fx.param("sb", sb);
    out.push(run("chamfer_loss", CaseKind::Loss, &fx, cfg, move |t, s| {
        let (a, b, sa, sb) = (t.param(s, qa_id), t.param(s, qb_id), t.param(s, sa_id), t.param(s, sb_id));
        Ok(losses::chamfer_loss(t, a, b, sa, sb))
    })?);

    let mut fx = Fixture::new(seed + 500);
    let q = fx.uniform(10, 3, -3.0, 3.0);
    let q_id = fx.param("q", q);
    let cloud: Vec<Point3<f64>> = (0..40)
        .map(|_| Point3::new(fx.rng.random_range(-3.0..3.0), fx.rng.random_range(-3.0..3.0), fx.rng.random_range(-3.0..3.0)))
        .collect();
    out.push(run("p2p_loss", CaseKind::Loss, &fx, cfg, move |t, s| {
        let qn = t.param(s, q_id);
        Ok(losses::p2p_loss(t, qn, &cloud))
    })?);

    let mut fx = Fixture::new(seed + 600);
    let (da, db) = (fx.random_param("da", 9, 6), fx.random_param("db", 7, 6));
    let rows = vec![0, 2, 3, 7, 8];
    let gt = vec![1, 0, 6, 6, 3];
    out.push(run("descriptor_loss", CaseKind::Loss, &fx, cfg, move |t, s| {
        let (a, b) = (t.param(s, da), t.param(s, db));
        let (an, bn) = (
            ops::activation(t, a, Activation::L2NormRows),
            ops::activation(t, b, Activation::L2NormRows),
        );
        let c = losses::correspondence_matrix(t, an, bn, &rows);
        // A mild temperature keeps the softmax away from saturation.
        Ok(losses::descriptor_loss(t, c, &gt, 0.5))
    })?);

    let mut fx = Fixture::new(seed + 700);
    let (pa, pb) = (fx.uniform(8, 3, -2.0, 2.0), fx.uniform(8, 3, -2.0, 2.0));
    let (pa_id, pb_id) = (fx.param("qa", pa), fx.param("qb", pb));
    let (s_a, s_b) = (fx.uniform(8, 1, 0.5, 1.5), fx.uniform(8, 1, 0.5, 1.5));
    let (sa_id, sb_id) = (fx.param("sa", s_a), fx.param("sb", s_b));
    let (da, db) = (fx.random_param("da", 8, 5), fx.random_param("db", 8, 5));
    let cloud: Vec<Point3<f64>> = (0..30)
        .map(|_| Point3::new(fx.rng.random_range(-2.0..2.0), fx.rng.random_range(-2.0..2.0), fx.rng.random_range(-2.0..2.0)))
        .collect();
    let lc = LossConfig::toy();
    out.push(run("total_local_loss", CaseKind::Loss, &fx, cfg, move |t, s| {
        let (a, b) = (t.param(s, pa_id), t.param(s, pb_id));
        let (sa, sb) = (t.param(s, sa_id), t.param(s, sb_id));
        let chamfer = losses::chamfer_loss(t, a, b, sa, sb);
        let p2p = losses::p2p_loss(t, a, &cloud);
        let (dan, dbn) = (t.param(s, da), t.param(s, db));
        let c = losses::correspondence_matrix(t, dan, dbn, &[0, 1, 4]);
        let desc = losses::descriptor_loss(t, c, &[2, 2, 7], 0.5);
        Ok(losses::total_local_loss(t, chamfer, p2p, Some(desc), &lc))
    })?);
    Ok(out)
}

/// Toy network on two small synthetic clouds: global probe plus the local
/// losses of the pair, differentiated w.r.t. sampled network parameters.
fn network_case(seed: u64, cfg: &GradCheckConfig) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 800);
    let mut points = Vec::new();
    for _ in 0..6 {
        let (cx, cy) = (rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0));
        for k in 0..25 {
            let a = k as f64 * 0.25;
            points.push(Point3::new(cx + 0.3 * a.cos(), cy + 0.3 * a.sin(), rng.random_range(-1.0..2.0)));
        }
    }
    let a = PointCloud::new(points);
    let b_to_a = PoseSE3::from_yaw(0.3, Vector3::new(0.5, -0.3, 0.0));
    let b = b_to_a.inverse().apply(&a);
    let pairs = vec![(a, b, b_to_a)];
    let model = EgoNN::new(NetConfig::toy(), seed)?;
    let loss_cfg = LossConfig::toy();
    let fx = Fixture {
        rng,
        store: model.params.clone(),
    };
    let probe_seed = seed;
    run("egonn_forward", CaseKind::Network, &fx, cfg, move |t, s| {
        let mut m = model.clone();
        m.params = s.clone();
        let clouds = [pairs[0].0.clone(), pairs[0].1.clone()];
        let out = m.forward(t, &clouds, Branches::Both, true)?;
        let g = probe(t, out.global.expect("global requested"), probe_seed);
        let local = out.local.as_ref().expect("local requested");
        let graph = local_loss_graph(t, local, &pairs, &loss_cfg);
        Ok(ops::weighted_sum(t, &[(g, 1.0), (graph.total, 1e-2)]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_is_linear() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::from_elem((2, 2), 1.0));
        let y = tape.leaf(Mat::from_elem((2, 2), 2.0));
        let (px, py) = (probe(&mut tape, x, 3), probe(&mut tape, y, 3));
        assert!((2.0 * tape.scalar(px) - tape.scalar(py)).abs() < 1e-12);
    }
}
