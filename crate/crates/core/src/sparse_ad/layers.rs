//! Sparse tensor layers: convolutions, normalization, attention, pooling.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use super::coords::{down_rulebook, up_rulebook, CoordSet, Rulebook};
use super::ops::{self, sigmoid, Activation};
use super::tape::{take_rows, Mat, NodeId, Tape};
use crate::error::{Error, Result};

/// Features attached to a coordinate set. Row `i` of the feature node
/// belongs to `coords.coords()[i]`.
#[derive(Debug, Clone)]
pub struct SparseTensor {
    pub coords: Arc<CoordSet>,
    pub feats: NodeId,
}

impl SparseTensor {
    pub fn new(tape: &Tape, coords: Arc<CoordSet>, feats: NodeId) -> Self {
        assert_eq!(tape.value(feats).nrows(), coords.len(), "one feature row per coordinate");
        Self { coords, feats }
    }

    pub fn channels(&self, tape: &Tape) -> usize {
        tape.value(self.feats).ncols()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Same coordinates, new features.
    pub fn with_feats(&self, feats: NodeId) -> Self {
        Self {
            coords: self.coords.clone(),
            feats,
        }
    }
}

/// Applies a kernel map: `out[o] += in[i] · W_tap` for every `(i, o)` in a tap.
/// The kernel node is `(taps · C_in) × C_out`.
pub fn conv_apply(tape: &mut Tape, x: NodeId, kernel: NodeId, rulebook: Arc<Rulebook>) -> NodeId {
    let xv = tape.value(x);
    let kv = tape.value(kernel);
    let c_in = xv.ncols();
    assert_eq!(xv.nrows(), rulebook.n_in, "rulebook input size");
    assert_eq!(kv.nrows(), rulebook.taps.len() * c_in, "kernel rows must be taps × C_in");
    let c_out = kv.ncols();
    let mut out = Mat::zeros((rulebook.n_out, c_out));
    for (t, pairs) in rulebook.taps.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let w = kv.slice(s![t * c_in..(t + 1) * c_in, ..]);
        let rows: Vec<usize> = pairs.iter().map(|p| p.0 as usize).collect();
        let prod = take_rows(xv.view(), &rows).dot(&w);
        for (k, &(_, o)) in pairs.iter().enumerate() {
            let mut row = out.row_mut(o as usize);
            row += &prod.row(k);
        }
    }
    tape.op(
        out,
        vec![x, kernel],
        Box::new(move |g, p, need| {
            let (xv, kv) = (p[0], p[1]);
            let mut gx = need[0].then(|| Mat::zeros(xv.dim()));
            let mut gk = need[1].then(|| Mat::zeros(kv.dim()));
            for (t, pairs) in rulebook.taps.iter().enumerate() {
                if pairs.is_empty() {
                    continue;
                }
                let out_rows: Vec<usize> = pairs.iter().map(|p| p.1 as usize).collect();
                let go = take_rows(g.view(), &out_rows);
                if let Some(gk) = gk.as_mut() {
                    let in_rows: Vec<usize> = pairs.iter().map(|p| p.0 as usize).collect();
                    let xin = take_rows(xv.view(), &in_rows);
                    let mut slot = gk.slice_mut(s![t * c_in..(t + 1) * c_in, ..]);
                    slot += &xin.t().dot(&go);
                }
                if let Some(gx) = gx.as_mut() {
                    let w = kv.slice(s![t * c_in..(t + 1) * c_in, ..]);
                    let back = go.dot(&w.t());
                    for (k, &(i, _)) in pairs.iter().enumerate() {
                        let mut row = gx.row_mut(i as usize);
                        row += &back.row(k);
                    }
                }
            }
            vec![gx, gk]
        }),
    )
}

/// Per-axis downsampling factors for the next level: ρ and z always halve;
/// θ halves while the level stride stays within `theta_stride_cap`.
pub fn down_factors(coords: &CoordSet, theta_stride_cap: u32) -> [u32; 3] {
    let ft = if coords.stride()[1] * 2 <= theta_stride_cap && coords.theta_bins() % 2 == 0 {
        2
    } else {
        1
    };
    [2, ft, 2]
}

/// Stride-1 convolution with an odd cubic kernel; the output lives on the
/// input coordinates. Kernel parameter is `(k³ · C_in) × C_out`.
pub fn sparse_conv(tape: &mut Tape, x: &SparseTensor, kernel: NodeId, k: usize) -> SparseTensor {
    let rb = Arc::new(x.coords.conv_rulebook(k));
    let feats = conv_apply(tape, x.feats, kernel, rb);
    x.with_feats(feats)
}

/// Stride-2 convolution with a 2×2×2 kernel onto the next level.
pub fn sparse_conv_down(tape: &mut Tape, x: &SparseTensor, kernel: NodeId, factors: [u32; 3]) -> SparseTensor {
    let coarse = Arc::new(x.coords.downsample(factors));
    let rb = Arc::new(down_rulebook(&x.coords, &coarse, factors));
    let feats = conv_apply(tape, x.feats, kernel, rb);
    SparseTensor { coords: coarse, feats }
}

/// Like [`sparse_conv_down`] onto an already-built coarse set.
pub fn sparse_conv_down_to(
    tape: &mut Tape,
    x: &SparseTensor,
    kernel: NodeId,
    coarse: Arc<CoordSet>,
    factors: [u32; 3],
) -> SparseTensor {
    let rb = Arc::new(down_rulebook(&x.coords, &coarse, factors));
    let feats = conv_apply(tape, x.feats, kernel, rb);
    SparseTensor { coords: coarse, feats }
}

/// Transposed 2×2×2 stride-2 convolution emitting exactly `target` coordinates.
pub fn sparse_tconv(
    tape: &mut Tape,
    x: &SparseTensor,
    kernel: NodeId,
    target: Arc<CoordSet>,
    factors: [u32; 3],
) -> SparseTensor {
    let rb = Arc::new(up_rulebook(&x.coords, &target, factors));
    let feats = conv_apply(tape, x.feats, kernel, rb);
    SparseTensor { coords: target, feats }
}

pub fn sparse_activation(tape: &mut Tape, x: &SparseTensor, kind: Activation) -> SparseTensor {
    let feats = ops::activation(tape, x.feats, kind);
    x.with_feats(feats)
}

pub fn sparse_add(tape: &mut Tape, a: &SparseTensor, b: &SparseTensor) -> SparseTensor {
    assert!(Arc::ptr_eq(&a.coords, &b.coords) || a.coords.coords() == b.coords.coords());
    let feats = ops::add(tape, a.feats, b.feats);
    a.with_feats(feats)
}

/// Per-voxel MLP: ReLU between layers, none after the last.
pub fn pointwise_mlp(tape: &mut Tape, x: &SparseTensor, layers: &[(NodeId, NodeId)]) -> SparseTensor {
    let mut h = x.feats;
    for (i, (w, b)) in layers.iter().enumerate() {
        h = ops::linear(tape, h, *w, Some(*b));
        if i + 1 < layers.len() {
            h = ops::activation(tape, h, Activation::Relu);
        }
    }
    x.with_feats(h)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average toward batch statistics.
    pub fn update(&mut self, batch: &RunningStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

pub enum NormMode<'a> {
    /// Batch statistics over every non-empty voxel of the batch.
    Train,
    Eval(&'a RunningStats),
}

/// Batch normalization. In train mode also returns the batch statistics
/// (mean and unbiased variance) to fold into the running estimate.
pub fn batch_norm(
    tape: &mut Tape,
    x: &SparseTensor,
    gamma: NodeId,
    beta: NodeId,
    mode: NormMode<'_>,
) -> (SparseTensor, Option<RunningStats>) {
    let xv = tape.value(x.feats);
    let (n, c) = xv.dim();
    assert_eq!(tape.value(gamma).dim(), (1, c), "gamma must be 1 × C");
    let (mean, var, batch) = match mode {
        NormMode::Train => {
            assert!(n > 0, "batch norm on an empty tensor");
            let mean = xv.mean_axis(Axis(0)).expect("non-empty");
            let centered = xv - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
            let unbiased = if n > 1 { &var * (n as f64 / (n as f64 - 1.0)) } else { var.clone() };
            let stats = RunningStats {
                mean: mean.to_vec(),
                var: unbiased.to_vec(),
            };
            (mean, var, Some(stats))
        }
        NormMode::Eval(rs) => (
            ndarray::Array1::from(rs.mean.clone()),
            ndarray::Array1::from(rs.var.clone()),
            None,
        ),
    };
    let train = batch.is_some();
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = (xv - &mean) * &inv_std;
    let y = &xhat * &tape.value(gamma).row(0) + &tape.value(beta).row(0);
    let feats = tape.op(
        y,
        vec![x.feats, gamma, beta],
        Box::new(move |g, p, need| {
            let gamma = p[1].row(0);
            let ggamma = need[1].then(|| (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
            let gbeta = need[2].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            let gx = need[0].then(|| {
                let dxhat = g * &gamma;
                if train {
                    let nf = n as f64;
                    let sum_d = dxhat.sum_axis(Axis(0));
                    let sum_dx = (&dxhat * &xhat).sum_axis(Axis(0));
                    let mut gx = &dxhat * nf - &sum_d - &xhat * &sum_dx;
                    gx *= &(&inv_std / nf);
                    gx
                } else {
                    dxhat * &inv_std
                }
            });
            vec![gx, ggamma, gbeta]
        }),
    );
    (x.with_feats(feats), batch)
}

/// Efficient channel attention: per-sample channel means, a zero-padded
/// 1-D convolution of width 3 across channels, a sigmoid gate, and a
/// channel-wise rescale of every voxel.
pub fn eca(tape: &mut Tape, x: &SparseTensor, kernel: NodeId) -> SparseTensor {
    let xv = tape.value(x.feats);
    let c = xv.ncols();
    assert_eq!(tape.value(kernel).len(), 3, "ECA kernel has 3 taps");
    let w: Vec<f64> = tape.value(kernel).iter().copied().collect();
    let ranges: Vec<Range<usize>> = x.coords.batch_ranges().to_vec();
    let b = ranges.len();
    let mut means = Mat::zeros((b, c));
    for (bi, r) in ranges.iter().enumerate() {
        if !r.is_empty() {
            means.row_mut(bi).assign(&xv.slice(s![r.clone(), ..]).mean_axis(Axis(0)).expect("non-empty"));
        }
    }
    let gate = Mat::from_shape_fn((b, c), |(bi, ci)| {
        let m = |k: isize| {
            let j = ci as isize + k;
            if j < 0 || j >= c as isize {
                0.0
            } else {
                means[[bi, j as usize]]
            }
        };
        sigmoid(w[0] * m(-1) + w[1] * m(0) + w[2] * m(1))
    });
    let mut y = xv.clone();
    for (bi, r) in ranges.iter().enumerate() {
        let mut block = y.slice_mut(s![r.clone(), ..]);
        block *= &gate.row(bi);
    }
    let feats = tape.op(
        y,
        vec![x.feats, kernel],
        Box::new(move |g, p, need| {
            let xv = p[0];
            let mut gx = Mat::zeros(xv.dim());
            let mut gw = Mat::zeros((1, 3));
            for (bi, r) in ranges.iter().enumerate() {
                if r.is_empty() {
                    continue;
                }
                let gb = g.slice(s![r.clone(), ..]);
                let xb = xv.slice(s![r.clone(), ..]);
                let gate_b = gate.row(bi);
                // d loss / d gate
                let dgate = (&gb * &xb).sum_axis(Axis(0));
                let dz: Vec<f64> = (0..c).map(|ci| dgate[ci] * gate_b[ci] * (1.0 - gate_b[ci])).collect();
                let mut dm = vec![0.0; c];
                for (ci, &dzc) in dz.iter().enumerate() {
                    for k in 0..3 {
                        let j = ci as isize + k as isize - 1;
                        if j >= 0 && (j as usize) < c {
                            gw[[0, k]] += dzc * means[[bi, j as usize]];
                            dm[j as usize] += dzc * w[k];
                        }
                    }
                }
                let nb = r.len() as f64;
                let mut gxb = gx.slice_mut(s![r.clone(), ..]);
                gxb.assign(&(&gb * &gate_b));
                for (ci, d) in dm.iter().enumerate() {
                    gxb.column_mut(ci).mapv_inplace(|v| v + d / nb);
                }
            }
            vec![need[0].then_some(gx), need[1].then_some(gw)]
        }),
    );
    x.with_feats(feats)
}

/// Clamp floor applied to features before GeM powering.
pub const GEM_EPS: f64 = 1e-6;

/// Generalized-mean pooling per batch element: `((1/K) Σ f^p)^{1/p}` per
/// channel. Returns a dense `B × C` node.
pub fn gem_pool(tape: &mut Tape, x: &SparseTensor, p: NodeId) -> Result<NodeId> {
    let ranges: Vec<Range<usize>> = x.coords.batch_ranges().to_vec();
    if ranges.iter().any(|r| r.is_empty()) {
        return Err(Error::EmptyInput("GeM pooling over a tensor without voxels"));
    }
    let xv = tape.value(x.feats);
    let pv = tape.value(p)[[0, 0]];
    let c = xv.ncols();
    let clamped = xv.mapv(|v| v.max(GEM_EPS));
    let mut means = Mat::zeros((ranges.len(), c));
    for (bi, r) in ranges.iter().enumerate() {
        means
            .row_mut(bi)
            .assign(&clamped.slice(s![r.clone(), ..]).mapv(|v| v.powf(pv)).mean_axis(Axis(0)).expect("non-empty"));
    }
    let y = means.mapv(|m| m.powf(1.0 / pv));
    let out = y.clone();
    Ok(tape.op(
        y,
        vec![x.feats, p],
        Box::new(move |g, parents, need| {
            let xv = parents[0];
            let mut gx = Mat::zeros(xv.dim());
            let mut gp = 0.0;
            for (bi, r) in ranges.iter().enumerate() {
                let k = r.len() as f64;
                for ci in 0..c {
                    let s_mean = means[[bi, ci]];
                    let yv = out[[bi, ci]];
                    let go = g[[bi, ci]];
                    // dy/df_r = s^{1/p - 1} f^{p-1} / K
                    let scale = yv / s_mean / k;
                    let mut ds_dp = 0.0;
                    for row in r.clone() {
                        let f = clamped[[row, ci]];
                        let fp = f.powf(pv);
                        if xv[[row, ci]] >= GEM_EPS {
                            gx[[row, ci]] = go * scale * fp / f;
                        }
                        ds_dp += fp * f.ln();
                    }
                    ds_dp /= k;
                    gp += go * yv * (ds_dp / (pv * s_mean) - s_mean.ln() / (pv * pv));
                }
            }
            vec![need[0].then_some(gx), need[1].then(|| Mat::from_elem((1, 1), gp))]
        }),
    ))
}

/// Single-channel occupancy features (value 1) on a coordinate set.
pub fn occupancy(tape: &mut Tape, coords: Arc<CoordSet>) -> SparseTensor {
    let feats = tape.constant(Array2::ones((coords.len(), 1)));
    SparseTensor { coords, feats }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VoxelCoord;
    use ndarray::array;

    fn single_voxel(tape: &mut Tape, value: f64) -> SparseTensor {
        let coords = Arc::new(CoordSet::from_voxels(vec![VoxelCoord::new(0, 3, 2, 1)], 8, true, 1));
        let feats = tape.leaf(array![[value]]);
        SparseTensor::new(tape, coords, feats)
    }

    #[test]
    fn isolated_voxel_sees_only_center_tap() {
        let mut tape = Tape::new();
        let x = single_voxel(&mut tape, 1.0);
        let kernel = tape.constant(Mat::ones((27, 1)));
        let y = sparse_conv(&mut tape, &x, kernel, 3);
        assert_eq!(tape.value(y.feats), &array![[1.0]]);
    }

    #[test]
    fn unit_kernel_identity() {
        let mut tape = Tape::new();
        let coords = Arc::new(CoordSet::from_voxels(
            vec![VoxelCoord::new(0, 0, 0, 0), VoxelCoord::new(0, 1, 0, 0)],
            8,
            true,
            1,
        ));
        let feats = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let x = SparseTensor::new(&tape, coords, feats);
        let kernel = tape.constant(Mat::eye(2));
        let y = sparse_conv(&mut tape, &x, kernel, 1);
        assert_eq!(tape.value(y.feats), tape.value(x.feats));
    }

    #[test]
    fn batch_norm_constant_channel() {
        let mut tape = Tape::new();
        let coords = Arc::new(CoordSet::from_voxels(
            (0..5).map(|i| VoxelCoord::new(0, i, 0, 0)).collect(),
            8,
            true,
            1,
        ));
        let feats = tape.leaf(Mat::from_elem((5, 2), 3.5));
        let x = SparseTensor::new(&tape, coords, feats);
        let gamma = tape.constant(Mat::ones((1, 2)));
        let beta = tape.constant(Mat::zeros((1, 2)));
        let (y, stats) = batch_norm(&mut tape, &x, gamma, beta, NormMode::Train);
        assert!(tape.value(y.feats).iter().all(|v| v.abs() < 1e-4));
        assert_eq!(stats.unwrap().mean, vec![3.5, 3.5]);
        let beta5 = tape.constant(Mat::from_elem((1, 2), 5.0));
        let (y, _) = batch_norm(&mut tape, &x, gamma, beta5, NormMode::Train);
        assert!(tape.value(y.feats).iter().all(|v| (v - 5.0).abs() < 1e-4));
    }

    #[test]
    fn single_voxel_batch_norm_is_finite() {
        let mut tape = Tape::new();
        let x = single_voxel(&mut tape, 2.0);
        let gamma = tape.constant(Mat::ones((1, 1)));
        let beta = tape.constant(Mat::zeros((1, 1)));
        let (y, _) = batch_norm(&mut tape, &x, gamma, beta, NormMode::Train);
        assert!(tape.value(y.feats)[[0, 0]].abs() < 1e-12);
    }

    #[test]
    fn eca_saturated_gate_and_zero_input() {
        let mut tape = Tape::new();
        let coords = Arc::new(CoordSet::from_voxels(
            (0..4).map(|i| VoxelCoord::new(0, i, 0, 0)).collect(),
            8,
            true,
            1,
        ));
        let feats = tape.leaf(Mat::from_shape_fn((4, 3), |(i, j)| 1.0 + (i + j) as f64));
        let x = SparseTensor::new(&tape, coords.clone(), feats);
        let big = tape.constant(Mat::from_elem((1, 3), 1e3));
        let y = eca(&mut tape, &x, big);
        let diff = (tape.value(y.feats) - tape.value(x.feats)).mapv(f64::abs);
        assert!(diff.iter().all(|d| *d < 1e-9));
        let zeros = tape.leaf(Mat::zeros((4, 3)));
        let z = SparseTensor::new(&tape, coords, zeros);
        let w = tape.constant(array![[0.3, -0.2, 0.5]]);
        let y = eca(&mut tape, &z, w);
        assert!(tape.value(y.feats).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gem_limits() {
        let mut tape = Tape::new();
        let coords = Arc::new(CoordSet::from_voxels(
            vec![VoxelCoord::new(0, 0, 0, 0), VoxelCoord::new(0, 1, 0, 0)],
            8,
            true,
            1,
        ));
        let feats = tape.leaf(array![[1.0, 4.0], [2.0, 4.0]]);
        let x = SparseTensor::new(&tape, coords, feats);
        let p1 = tape.constant(array![[1.0]]);
        let y = gem_pool(&mut tape, &x, p1).unwrap();
        assert!((tape.value(y)[[0, 0]] - 1.5).abs() < 1e-12);
        assert!((tape.value(y)[[0, 1]] - 4.0).abs() < 1e-12);
        let p100 = tape.constant(array![[100.0]]);
        let y = gem_pool(&mut tape, &x, p100).unwrap();
        assert!((tape.value(y)[[0, 0]] - 2.0).abs() < 0.02);
        assert!((tape.value(y)[[0, 1]] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn gem_rejects_empty_batch_element() {
        let mut tape = Tape::new();
        let coords = Arc::new(CoordSet::from_voxels(vec![VoxelCoord::new(1, 0, 0, 0)], 8, true, 2));
        let feats = tape.leaf(array![[1.0]]);
        let x = SparseTensor::new(&tape, coords, feats);
        let p = tape.constant(array![[3.0]]);
        assert!(gem_pool(&mut tape, &x, p).is_err());
    }

    #[test]
    fn mlp_output_width() {
        let mut tape = Tape::new();
        let coords = Arc::new(CoordSet::from_voxels(
            (0..3).map(|i| VoxelCoord::new(0, i, 0, 0)).collect(),
            8,
            true,
            1,
        ));
        let feats = tape.leaf(Mat::ones((3, 128)));
        let x = SparseTensor::new(&tape, coords, feats);
        let w1 = tape.constant(Mat::zeros((128, 192)));
        let b1 = tape.constant(Mat::zeros((1, 192)));
        let w2 = tape.constant(Mat::zeros((192, 256)));
        let b2 = tape.constant(Mat::zeros((1, 256)));
        let y = pointwise_mlp(&mut tape, &x, &[(w1, b1), (w2, b2)]);
        assert_eq!(tape.value(y.feats).dim(), (3, 256));
    }

    mod dense_oracle {
        use super::*;
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        const RHO: i32 = 5;
        const THETA: i32 = 8;
        const Z: i32 = 4;

        fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
            Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
        }

        /// Occupied voxels of a small periodic grid and their features.
        fn random_cloud(rng: &mut ChaCha8Rng, occupancy: f64, c: usize) -> (Vec<VoxelCoord>, Mat) {
            let mut vox = Vec::new();
            for r in 0..RHO {
                for t in 0..THETA {
                    for z in 0..Z {
                        if rng.random_bool(occupancy) {
                            vox.push(VoxelCoord::new(0, r, t, z));
                        }
                    }
                }
            }
            if vox.is_empty() {
                vox.push(VoxelCoord::new(0, 0, 0, 0));
            }
            let feats = random_mat(rng, vox.len(), c);
            (vox, feats)
        }

        /// Dense grid, zero where empty, indexed by (ρ, θ, z).
        fn densify<'a>(vox: &'a [VoxelCoord], feats: &'a Mat) -> impl Fn(i32, i32, i32) -> Vec<f64> + 'a {
            move |r, t, z| {
                let t = t.rem_euclid(THETA);
                match vox.iter().position(|v| (v.i_rho, v.i_theta, v.i_z) == (r, t, z)) {
                    Some(i) => feats.row(i).to_vec(),
                    None => vec![0.0; feats.ncols()],
                }
            }
        }

        fn accumulate(out: &mut [f64], x: &[f64], w: ndarray::ArrayView2<f64>) {
            for (ci, xv) in x.iter().enumerate() {
                for (co, o) in out.iter_mut().enumerate() {
                    *o += xv * w[[ci, co]];
                }
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn stride_one_matches_dense_convolution(seed in any::<u64>(), occ in 0.1f64..0.9) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (c_in, c_out) = (2, 3);
                let (vox, feats) = random_cloud(&mut rng, occ, c_in);
                let kernel = random_mat(&mut rng, 27 * c_in, c_out);
                let mut tape = Tape::new();
                let coords = Arc::new(CoordSet::from_voxels(vox.clone(), THETA as u32, true, 1));
                // from_voxels sorts; reorder features to match.
                let sorted: Vec<usize> = coords.coords().iter().map(|c| vox.iter().position(|v| v == c).unwrap()).collect();
                let feats = take_rows(feats.view(), &sorted);
                let vox = coords.coords().to_vec();
                let x_f = tape.leaf(feats.clone());
                let x = SparseTensor::new(&tape, coords, x_f);
                let k = tape.constant(kernel.clone());
                let y = sparse_conv(&mut tape, &x, k, 3);
                let dense = densify(&vox, &feats);
                for (row, v) in vox.iter().enumerate() {
                    let mut expect = vec![0.0; c_out];
                    let mut tap = 0;
                    for dr in -1..=1 {
                        for dt in -1..=1 {
                            for dz in -1..=1 {
                                let w = kernel.slice(s![tap * c_in..(tap + 1) * c_in, ..]);
                                accumulate(&mut expect, &dense(v.i_rho + dr, v.i_theta + dt, v.i_z + dz), w);
                                tap += 1;
                            }
                        }
                    }
                    for co in 0..c_out {
                        prop_assert!((tape.value(y.feats)[[row, co]] - expect[co]).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn stride_two_matches_dense_convolution(seed in any::<u64>(), occ in 0.1f64..0.9) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (c_in, c_out) = (2, 3);
                let (vox, feats) = random_cloud(&mut rng, occ, c_in);
                let kernel = random_mat(&mut rng, 8 * c_in, c_out);
                let mut tape = Tape::new();
                let coords = Arc::new(CoordSet::from_voxels(vox.clone(), THETA as u32, true, 1));
                let sorted: Vec<usize> = coords.coords().iter().map(|c| vox.iter().position(|v| v == c).unwrap()).collect();
                let feats = take_rows(feats.view(), &sorted);
                let vox = coords.coords().to_vec();
                let x_f = tape.leaf(feats.clone());
                let x = SparseTensor::new(&tape, coords, x_f);
                let k = tape.constant(kernel.clone());
                let y = sparse_conv_down(&mut tape, &x, k, [2, 2, 2]);
                let dense = densify(&vox, &feats);
                let mut parents: Vec<(i32, i32, i32)> = vox.iter().map(|v| (v.i_rho / 2, v.i_theta / 2, v.i_z / 2)).collect();
                parents.sort_unstable();
                parents.dedup();
                prop_assert_eq!(y.coords.len(), parents.len());
                for (row, &(pr, pt, pz)) in parents.iter().enumerate() {
                    let c = y.coords.coords()[row];
                    prop_assert_eq!((c.i_rho, c.i_theta, c.i_z), (pr, pt, pz));
                    let mut expect = vec![0.0; c_out];
                    for tap in 0..8 {
                        let (dr, dt, dz) = ((tap / 4) as i32, ((tap / 2) % 2) as i32, (tap % 2) as i32);
                        let w = kernel.slice(s![tap * c_in..(tap + 1) * c_in, ..]);
                        accumulate(&mut expect, &dense(2 * pr + dr, 2 * pt + dt, 2 * pz + dz), w);
                    }
                    for co in 0..c_out {
                        prop_assert!((tape.value(y.feats)[[row, co]] - expect[co]).abs() < 1e-12);
                    }
                }
            }

            /// ⟨down(x), y⟩ = ⟨x, up(y)⟩ when the up kernel holds the
            /// transposed blocks of the down kernel.
            #[test]
            fn transposed_conv_is_adjoint_of_strided_conv(seed in any::<u64>(), occ in 0.1f64..0.9) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (c_in, c_out) = (3, 2);
                let (vox, feats) = random_cloud(&mut rng, occ, c_in);
                let kernel = random_mat(&mut rng, 8 * c_in, c_out);
                let mut kernel_t = Mat::zeros((8 * c_out, c_in));
                for tap in 0..8 {
                    let block = kernel.slice(s![tap * c_in..(tap + 1) * c_in, ..]);
                    kernel_t.slice_mut(s![tap * c_out..(tap + 1) * c_out, ..]).assign(&block.t());
                }
                let mut tape = Tape::new();
                let fine = Arc::new(CoordSet::from_voxels(vox, THETA as u32, true, 1));
                let x_f = tape.leaf(feats);
                let x = SparseTensor::new(&tape, fine.clone(), x_f);
                let k = tape.constant(kernel);
                let down = sparse_conv_down(&mut tape, &x, k, [2, 2, 2]);
                let yv = random_mat(&mut rng, down.len(), c_out);
                let y_f = tape.leaf(yv.clone());
                let y = SparseTensor::new(&tape, down.coords.clone(), y_f);
                let kt = tape.constant(kernel_t);
                let up = sparse_tconv(&mut tape, &y, kt, fine, [2, 2, 2]);
                let lhs: f64 = (tape.value(down.feats) * &yv).sum();
                let rhs: f64 = (tape.value(x.feats) * tape.value(up.feats)).sum();
                prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
            }
        }
    }
}
