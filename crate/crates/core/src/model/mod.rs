//! The EgoNN network: a sparse cylindrical-voxel trunk with a global branch
//! (place descriptor) and a local branch (keypoints, saliency, descriptors).

pub mod keypoints;

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quantize_batch, CylPoint, PointCloud, QuantizationSpec, VoxelCoord};
use crate::sparse_ad::checkpoint::{self, Record};
use crate::sparse_ad::layers::{self, batch_norm, conv_apply, down_factors, eca, gem_pool, occupancy};
use crate::sparse_ad::params::{he_normal, round_to_f32};
use crate::sparse_ad::{
    ops, Activation, CoordSet, Group, Mat, NodeId, NormMode, ParamId, ParamStore, Parameter, RunningStats,
    SparseTensor, Tape,
};

pub use keypoints::{
    decode_cylindrical, decode_keypoints, decode_keypoints_op, repeatability, select_keypoints, KeypointSet,
    SupervoxelGrid,
};

/// Added to the softplus output so the saliency uncertainty never reaches zero.
pub const SALIENCY_FLOOR: f64 = 1e-3;

/// Pyramid level of the local feature map (stride 8).
pub const LOCAL_LEVEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Trunk widths `c0..c7` before scaling.
    pub channels: Vec<usize>,
    pub conv0_kernel: usize,
    pub global_channels: usize,
    pub global_hidden: usize,
    /// Global descriptor length; not divided by `scale`.
    pub global_dim: usize,
    pub local_channels: usize,
    /// Hidden width of the saliency and position heads.
    pub head_hidden: usize,
    pub descriptor_hidden: usize,
    /// Local descriptor length; not divided by `scale`.
    pub descriptor_dim: usize,
    /// Divides every internal width.
    pub scale: usize,
    pub theta_wrap: bool,
    /// Largest azimuth stride of the pyramid, in base bins.
    pub theta_stride_cap: u32,
    pub gem_p_init: f64,
    pub quantization: QuantizationSpec,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl NetConfig {
    pub fn full() -> Self {
        Self {
            channels: vec![32, 32, 64, 64, 128, 128, 128, 128],
            conv0_kernel: 5,
            global_channels: 128,
            global_hidden: 192,
            global_dim: 256,
            local_channels: 64,
            head_hidden: 32,
            descriptor_hidden: 96,
            descriptor_dim: 128,
            scale: 1,
            theta_wrap: true,
            theta_stride_cap: 32,
            gem_p_init: 3.0,
            quantization: QuantizationSpec::full(),
        }
    }

    pub fn toy() -> Self {
        Self {
            scale: 4,
            quantization: QuantizationSpec::toy(),
            ..Self::full()
        }
    }

    pub fn width(&self, c: usize) -> usize {
        (c / self.scale.max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.len() != 8 {
            return bad(format!("net.channels needs 8 entries, got {}", self.channels.len()));
        }
        if self.scale == 0 {
            return bad("net.scale must be positive".into());
        }
        let widths = self.channels.iter().chain([
            &self.global_channels,
            &self.global_hidden,
            &self.global_dim,
            &self.local_channels,
            &self.head_hidden,
            &self.descriptor_hidden,
            &self.descriptor_dim,
        ]);
        if widths.into_iter().any(|&w| w == 0) {
            return bad("network widths must be positive".into());
        }
        if self.conv0_kernel % 2 == 0 {
            return bad("net.conv0_kernel must be odd".into());
        }
        if !(self.gem_p_init.is_finite() && self.gem_p_init >= 1.0) {
            return bad("net.gem_p_init must be >= 1".into());
        }
        if self.theta_stride_cap == 0 || !self.theta_stride_cap.is_power_of_two() {
            return bad("net.theta_stride_cap must be a power of two".into());
        }
        self.quantization.validate()
    }

    /// Per-axis stride of each pyramid level, in base voxels.
    pub fn level_strides(&self) -> Vec<[u32; 3]> {
        let bins = self.quantization.theta_bins() as u32;
        let mut out = vec![[1, 1, 1]];
        for _ in 1..8 {
            let s = *out.last().expect("non-empty");
            let ft = if s[1] * 2 <= self.theta_stride_cap && (bins / s[1]) % 2 == 0 { 2 } else { 1 };
            out.push([s[0] * 2, s[1] * ft, s[2] * 2]);
        }
        out
    }

    pub fn supervoxel_grid(&self) -> SupervoxelGrid {
        SupervoxelGrid::from_stride(&self.quantization, self.level_strides()[LOCAL_LEVEL])
    }
}

/// Which branches a forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branches {
    Global,
    Local,
    Both,
}

impl Branches {
    fn global(self) -> bool {
        matches!(self, Branches::Global | Branches::Both)
    }

    fn local(self) -> bool {
        matches!(self, Branches::Local | Branches::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub vec: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    kernel: ParamId,
    bn: Bn,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    down: ConvBn,
    conv1: ConvBn,
    conv2: ConvBn,
    eca: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    conv0: ConvBn,
    blocks: Vec<Block>,
    tconv7: ParamId,
    tconv6: ParamId,
    lat6: ParamId,
    lat5: ParamId,
    global_mlp: Vec<(ParamId, ParamId)>,
    gem_p: ParamId,
    tconv5: ParamId,
    tconv4: ParamId,
    lat4: ParamId,
    lat3: ParamId,
    saliency: Vec<(ParamId, ParamId)>,
    position: Vec<(ParamId, ParamId)>,
    descriptor: Vec<(ParamId, ParamId)>,
}

struct Builder<'a> {
    params: ParamStore,
    bn_names: Vec<String>,
    bn_stats: Vec<RunningStats>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, values: Mat, group: Group) -> ParamId {
        let mut values = values;
        round_to_f32(&mut values);
        let shape = vec![values.nrows(), values.ncols()];
        self.params.add(Parameter::new(name, shape, values, group))
    }

    fn kernel(&mut self, name: &str, taps: usize, c_in: usize, c_out: usize, group: Group) -> ParamId {
        let w = he_normal(self.rng, taps * c_in, c_out, taps * c_in);
        self.add(format!("{name}.kernel"), w, group)
    }

    fn bn(&mut self, name: &str, c: usize, group: Group) -> Bn {
        let gamma = self.add(format!("{name}.bn.gamma"), Mat::ones((1, c)), group);
        let beta = self.add(format!("{name}.bn.beta"), Mat::zeros((1, c)), group);
        self.bn_names.push(format!("{name}.bn"));
        self.bn_stats.push(RunningStats::new(c));
        Bn {
            gamma,
            beta,
            stats: self.bn_stats.len() - 1,
        }
    }

    fn conv_bn(&mut self, name: &str, taps: usize, c_in: usize, c_out: usize, group: Group) -> ConvBn {
        ConvBn {
            kernel: self.kernel(name, taps, c_in, c_out, group),
            bn: self.bn(name, c_out, group),
        }
    }

    fn mlp(&mut self, name: &str, dims: &[usize], group: Group) -> Vec<(ParamId, ParamId)> {
        dims.windows(2)
            .enumerate()
            .map(|(i, d)| {
                let w = he_normal(self.rng, d[0], d[1], d[0]);
                let w = self.add(format!("{name}.{i}.weight"), w, group);
                let b = self.add(format!("{name}.{i}.bias"), Mat::zeros((1, d[1])), group);
                (w, b)
            })
            .collect()
    }
}

/// Outputs of the local branch for a whole batch. Rows follow the sorted
/// stride-8 coordinate set, so cloud `b` owns `coords.batch_range(b)`.
pub struct LocalOutput {
    pub coords: Arc<CoordSet>,
    pub grid: SupervoxelGrid,
    pub centers: Vec<CylPoint>,
    /// `M × 3` offsets in `(-1, 1)`.
    pub raw: NodeId,
    /// `M × 1` uncertainties.
    pub saliency: NodeId,
    /// `M × 3` Cartesian keypoints.
    pub positions: NodeId,
    /// `M × D` unit descriptors.
    pub descriptors: NodeId,
}

impl LocalOutput {
    pub fn rows(&self, b: usize) -> Vec<usize> {
        self.coords.batch_range(b).collect()
    }

    /// Plain-data keypoints of cloud `b`.
    pub fn keypoints(&self, tape: &Tape, b: usize) -> KeypointSet {
        let range = self.coords.batch_range(b);
        let (raw, sal, pos, desc) = (
            tape.value(self.raw),
            tape.value(self.saliency),
            tape.value(self.positions),
            tape.value(self.descriptors),
        );
        let rows: Vec<usize> = range.clone().collect();
        KeypointSet {
            positions: rows
                .iter()
                .map(|&r| nalgebra::Point3::new(pos[[r, 0]], pos[[r, 1]], pos[[r, 2]]))
                .collect(),
            raw: rows.iter().map(|&r| [raw[[r, 0]], raw[[r, 1]], raw[[r, 2]]]).collect(),
            saliency: rows.iter().map(|&r| sal[[r, 0]]).collect(),
            descriptors: crate::sparse_ad::take_rows(desc.view(), &rows),
            supervoxel_centers: rows.iter().map(|&r| self.centers[r]).collect(),
            supervoxel_index: rows.iter().map(|&r| r - range.start).collect(),
        }
    }
}

pub struct ForwardOutput {
    /// `B × global_dim`.
    pub global: Option<NodeId>,
    pub local: Option<LocalOutput>,
    /// Batch statistics of every normalization layer run in training mode.
    pub bn_updates: Vec<(usize, RunningStats)>,
}

/// Per-cloud inference result.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub global: Option<GlobalDescriptor>,
    pub keypoints: Option<KeypointSet>,
}

impl Extraction {
    /// Records for the checkpoint container: `global` (D), and
    /// `keypoints.{positions,raw,centers}` (M × 3), `keypoints.saliency`,
    /// `keypoints.supervoxel_index` (M), `keypoints.descriptors` (M × D).
    /// Values are stored as `f32`.
    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        if let Some(g) = &self.global {
            out.push(Record::from_f64("global", vec![g.vec.len()], g.vec.iter().copied()));
        }
        if let Some(k) = &self.keypoints {
            let m = k.len();
            let rows3 = |name: &str, rows: Vec<[f64; 3]>| Record::from_f64(name, vec![m, 3], rows.into_iter().flatten());
            out.push(rows3("keypoints.positions", k.positions.iter().map(|p| [p.x, p.y, p.z]).collect()));
            out.push(rows3("keypoints.raw", k.raw.clone()));
            out.push(rows3(
                "keypoints.centers",
                k.supervoxel_centers.iter().map(|c| [c.rho, c.theta, c.z]).collect(),
            ));
            out.push(Record::from_f64("keypoints.saliency", vec![m], k.saliency.iter().copied()));
            out.push(Record::from_f64(
                "keypoints.supervoxel_index",
                vec![m],
                k.supervoxel_index.iter().map(|i| *i as f64),
            ));
            out.push(Record::from_f64(
                "keypoints.descriptors",
                vec![m, k.descriptors.ncols()],
                k.descriptors.iter().copied(),
            ));
        }
        out
    }

    pub fn from_records(records: &[Record]) -> Result<Self> {
        let get = |name: &str| records.iter().find(|r| r.name == name);
        let global = get("global").map(|r| GlobalDescriptor { vec: r.to_f64() });
        let keypoints = match get("keypoints.positions") {
            None => None,
            Some(pos) => {
                let m = pos.shape.first().copied().unwrap_or(0);
                let need = |name: &str| -> Result<&Record> {
                    let r = get(name).ok_or_else(|| Error::Data(format!("feature file lacks {name}")))?;
                    if r.shape.first() != Some(&m) {
                        return Err(Error::Data(format!("{name} has {:?} rows, expected {m}", r.shape.first())));
                    }
                    Ok(r)
                };
                let rows3 = |r: &Record| -> Vec<[f64; 3]> {
                    r.to_f64().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
                };
                let desc = need("keypoints.descriptors")?;
                let d = desc.shape.get(1).copied().unwrap_or(0);
                Some(KeypointSet {
                    positions: rows3(pos).into_iter().map(|p| nalgebra::Point3::new(p[0], p[1], p[2])).collect(),
                    raw: rows3(need("keypoints.raw")?),
                    saliency: need("keypoints.saliency")?.to_f64(),
                    descriptors: Mat::from_shape_vec((m, d), desc.to_f64())
                        .map_err(|e| Error::Data(format!("keypoint descriptors: {e}")))?,
                    supervoxel_centers: rows3(need("keypoints.centers")?)
                        .into_iter()
                        .map(|c| CylPoint { rho: c[0], theta: c[1], z: c[2] })
                        .collect(),
                    supervoxel_index: need("keypoints.supervoxel_index")?
                        .values
                        .iter()
                        .map(|v| *v as usize)
                        .collect(),
                })
            }
        };
        Ok(Self { global, keypoints })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct EgoNN {
    pub config: NetConfig,
    pub params: ParamStore,
    bn_names: Vec<String>,
    bn_stats: Vec<RunningStats>,
    layout: Layout,
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    train: bool,
    updates: Vec<(usize, RunningStats)>,
}

impl EgoNN {
    /// Freshly initialized network; initialization is a function of `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            bn_names: Vec::new(),
            bn_stats: Vec::new(),
            rng: &mut rng,
        };
        let w: Vec<usize> = config.channels.iter().map(|&c| config.width(c)).collect();
        let (t, g, l) = (Group::Trunk, Group::Global, Group::Local);

        let conv0 = b.conv_bn("trunk.conv0", config.conv0_kernel.pow(3), 1, w[0], t);
        let mut blocks = Vec::new();
        for k in 1..8 {
            let name = format!("trunk.conv{k}");
            blocks.push(Block {
                down: b.conv_bn(&format!("{name}.down"), 8, w[k - 1], w[k], t),
                conv1: b.conv_bn(&format!("{name}.a"), 27, w[k], w[k], t),
                conv2: b.conv_bn(&format!("{name}.b"), 27, w[k], w[k], t),
                eca: {
                    let k3 = he_normal(b.rng, 1, 3, 3);
                    b.add(format!("{name}.eca.kernel"), k3, t)
                },
            });
        }

        let gc = config.width(config.global_channels);
        let tconv7 = b.kernel("global.tconv7", 8, w[7], gc, g);
        let tconv6 = b.kernel("global.tconv6", 8, gc, gc, g);
        let lat6 = b.kernel("global.lateral6", 1, w[6], gc, g);
        let lat5 = b.kernel("global.lateral5", 1, w[5], gc, g);
        let global_mlp = b.mlp("global.mlp", &[gc, config.width(config.global_hidden), config.global_dim], g);
        let gem_p = b.add("global.gem.p".into(), Mat::from_elem((1, 1), config.gem_p_init), g);

        let lc = config.width(config.local_channels);
        let tconv5 = b.kernel("local.tconv5", 8, w[5], lc, l);
        let tconv4 = b.kernel("local.tconv4", 8, lc, lc, l);
        let lat4 = b.kernel("local.lateral4", 1, w[4], lc, l);
        let lat3 = b.kernel("local.lateral3", 1, w[3], lc, l);
        let hh = config.width(config.head_hidden);
        let saliency = b.mlp("local.saliency", &[lc, hh, 1], l);
        let position = b.mlp("local.position", &[lc, hh, 3], l);
        let descriptor = b.mlp(
            "local.descriptor",
            &[lc, config.width(config.descriptor_hidden), config.descriptor_dim],
            l,
        );

        let layout = Layout {
            conv0,
            blocks,
            tconv7,
            tconv6,
            lat6,
            lat5,
            global_mlp,
            gem_p,
            tconv5,
            tconv4,
            lat4,
            lat3,
            saliency,
            position,
            descriptor,
        };
        Ok(Self {
            config,
            params: b.params,
            bn_names: b.bn_names,
            bn_stats: b.bn_stats,
            layout,
        })
    }

    pub fn bn_stats(&self) -> &[RunningStats] {
        &self.bn_stats
    }

    /// Folds batch statistics from a training pass into the running
    /// statistics. Values are kept representable in `f32`.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, RunningStats)]) {
        for (i, batch) in updates {
            let rs = &mut self.bn_stats[*i];
            rs.update(batch, layers::BN_MOMENTUM);
            for v in rs.mean.iter_mut().chain(rs.var.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    fn conv_bn_relu(&self, ctx: &mut Ctx, x: &SparseTensor, cb: &ConvBn, rb: Arc<crate::sparse_ad::Rulebook>, out: Arc<CoordSet>) -> SparseTensor {
        let k = ctx.tape.param(&self.params, cb.kernel);
        let feats = conv_apply(ctx.tape, x.feats, k, rb);
        let y = SparseTensor { coords: out, feats };
        self.bn_relu(ctx, &y, &cb.bn)
    }

    fn bn_relu(&self, ctx: &mut Ctx, x: &SparseTensor, bn: &Bn) -> SparseTensor {
        let gamma = ctx.tape.param(&self.params, bn.gamma);
        let beta = ctx.tape.param(&self.params, bn.beta);
        let mode = if ctx.train {
            NormMode::Train
        } else {
            NormMode::Eval(&self.bn_stats[bn.stats])
        };
        let (y, stats) = batch_norm(ctx.tape, x, gamma, beta, mode);
        if let Some(s) = stats {
            ctx.updates.push((bn.stats, s));
        }
        layers::sparse_activation(ctx.tape, &y, Activation::Relu)
    }

    fn tconv(&self, ctx: &mut Ctx, x: &SparseTensor, kernel: ParamId, target: &Arc<CoordSet>, factors: [u32; 3]) -> SparseTensor {
        let k = ctx.tape.param(&self.params, kernel);
        layers::sparse_tconv(ctx.tape, x, k, target.clone(), factors)
    }

    fn lateral(&self, ctx: &mut Ctx, x: &SparseTensor, kernel: ParamId) -> SparseTensor {
        let k = ctx.tape.param(&self.params, kernel);
        let feats = ops::linear(ctx.tape, x.feats, k, None);
        x.with_feats(feats)
    }

    fn mlp(&self, ctx: &mut Ctx, x: &SparseTensor, layers_: &[(ParamId, ParamId)]) -> SparseTensor {
        let nodes: Vec<(NodeId, NodeId)> = layers_
            .iter()
            .map(|(w, b)| (ctx.tape.param(&self.params, *w), ctx.tape.param(&self.params, *b)))
            .collect();
        layers::pointwise_mlp(ctx.tape, x, &nodes)
    }

    /// Base-level coordinate set of a batch.
    pub fn input_coords(&self, clouds: &[PointCloud]) -> Result<CoordSet> {
        let q = &self.config.quantization;
        let mut voxels: Vec<VoxelCoord> = Vec::new();
        for (b, cloud) in clouds.iter().enumerate() {
            if !cloud.is_finite() {
                return Err(Error::NonFinite(format!("input cloud {b} has non-finite coordinates")));
            }
            let v = quantize_batch(cloud, q, b as u32);
            if v.is_empty() {
                return Err(Error::InputTooSmall);
            }
            voxels.extend(v);
        }
        if clouds.is_empty() {
            return Err(Error::EmptyInput("forward pass over an empty batch"));
        }
        Ok(CoordSet::from_voxels(
            voxels,
            q.theta_bins() as u32,
            self.config.theta_wrap,
            clouds.len(),
        ))
    }

    /// Records the network on `tape`. In training mode normalization uses
    /// batch statistics, which are returned rather than applied.
    pub fn forward(&self, tape: &mut Tape, clouds: &[PointCloud], branches: Branches, train: bool) -> Result<ForwardOutput> {
        let base = Arc::new(self.input_coords(clouds)?);
        let mut ctx = Ctx {
            tape,
            train,
            updates: Vec::new(),
        };
        let lay = &self.layout;
        let top = if branches.global() { 7 } else { 5 };

        let x = occupancy(ctx.tape, base.clone());
        let rb0 = Arc::new(base.conv_rulebook(self.config.conv0_kernel));
        let mut levels = vec![self.conv_bn_relu(&mut ctx, &x, &lay.conv0, rb0, base)];
        let mut factors = vec![[1u32; 3]];
        for k in 1..=top {
            let prev = levels.last().expect("level 0 exists").clone();
            let f = down_factors(&prev.coords, self.config.theta_stride_cap);
            let coarse = Arc::new(prev.coords.downsample(f));
            let block = &lay.blocks[k - 1];
            let rb_down = Arc::new(crate::sparse_ad::coords::down_rulebook(&prev.coords, &coarse, f));
            let mut h = self.conv_bn_relu(&mut ctx, &prev, &block.down, rb_down, coarse.clone());
            let rb3 = Arc::new(coarse.conv_rulebook(3));
            h = self.conv_bn_relu(&mut ctx, &h, &block.conv1, rb3.clone(), coarse.clone());
            h = self.conv_bn_relu(&mut ctx, &h, &block.conv2, rb3, coarse);
            let ek = ctx.tape.param(&self.params, block.eca);
            h = eca(ctx.tape, &h, ek);
            levels.push(h);
            factors.push(f);
        }

        let global = if branches.global() {
            let up7 = self.tconv(&mut ctx, &levels[7], lay.tconv7, &levels[6].coords, factors[7]);
            let l6 = self.lateral(&mut ctx, &levels[6], lay.lat6);
            let h6 = layers::sparse_add(ctx.tape, &up7, &l6);
            let up6 = self.tconv(&mut ctx, &h6, lay.tconv6, &levels[5].coords, factors[6]);
            let l5 = self.lateral(&mut ctx, &levels[5], lay.lat5);
            let fg = layers::sparse_add(ctx.tape, &up6, &l5);
            let emb = self.mlp(&mut ctx, &fg, &lay.global_mlp);
            let p = ctx.tape.param(&self.params, lay.gem_p);
            Some(gem_pool(ctx.tape, &emb, p)?)
        } else {
            None
        };

        let local = if branches.local() {
            let up5 = self.tconv(&mut ctx, &levels[5], lay.tconv5, &levels[4].coords, factors[5]);
            let l4 = self.lateral(&mut ctx, &levels[4], lay.lat4);
            let h4 = layers::sparse_add(ctx.tape, &up5, &l4);
            let up4 = self.tconv(&mut ctx, &h4, lay.tconv4, &levels[3].coords, factors[4]);
            let l3 = self.lateral(&mut ctx, &levels[3], lay.lat3);
            let fl = layers::sparse_add(ctx.tape, &up4, &l3);

            let sal = self.mlp(&mut ctx, &fl, &lay.saliency);
            let sal = ops::activation(ctx.tape, sal.feats, Activation::Softplus);
            let saliency = ops::add_scalar(ctx.tape, sal, SALIENCY_FLOOR);
            let pos = self.mlp(&mut ctx, &fl, &lay.position);
            let raw = ops::activation(ctx.tape, pos.feats, Activation::Tanh);
            let desc = self.mlp(&mut ctx, &fl, &lay.descriptor);
            let descriptors = ops::activation(ctx.tape, desc.feats, Activation::L2NormRows);

            let coords = fl.coords.clone();
            let grid = SupervoxelGrid::from_stride(&self.config.quantization, coords.stride());
            let centers: Vec<CylPoint> = coords.coords().iter().map(|c| grid.center(c.axes())).collect();
            let positions = decode_keypoints_op(ctx.tape, raw, grid, centers.clone());
            Some(LocalOutput {
                coords,
                grid,
                centers,
                raw,
                saliency,
                positions,
                descriptors,
            })
        } else {
            None
        };

        Ok(ForwardOutput {
            global,
            local,
            bn_updates: ctx.updates,
        })
    }

    /// Inference on one cloud with running normalization statistics.
    pub fn extract_one(&self, cloud: &PointCloud, branches: Branches) -> Result<Extraction> {
        let mut tape = Tape::frozen();
        let out = self.forward(&mut tape, std::slice::from_ref(cloud), branches, false)?;
        let global = out.global.map(|g| GlobalDescriptor {
            vec: tape.value(g).row(0).to_vec(),
        });
        if let Some(g) = &global {
            if g.vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("global descriptor".into()));
            }
        }
        let keypoints = out.local.map(|l| l.keypoints(&tape, 0));
        Ok(Extraction { global, keypoints })
    }

    /// Inference on many clouds in parallel; results follow input order.
    pub fn extract(&self, clouds: &[PointCloud], branches: Branches) -> Result<Vec<Extraction>> {
        clouds.par_iter().map(|c| self.extract_one(c, branches)).collect()
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut out: Vec<Record> = self
            .params
            .iter()
            .map(|p| Record::from_f64(p.name.clone(), p.shape.clone(), p.values.iter().copied()))
            .collect();
        for (name, rs) in self.bn_names.iter().zip(&self.bn_stats) {
            out.push(Record::from_f64(format!("{name}.running_mean"), vec![rs.mean.len()], rs.mean.clone()));
            out.push(Record::from_f64(format!("{name}.running_var"), vec![rs.var.len()], rs.var.clone()));
        }
        out
    }

    /// Overwrites weights and statistics from checkpoint records. Every
    /// tensor of the network must be present with a matching shape; unknown
    /// records are ignored so optimizer state can share the file.
    pub fn load_records(&mut self, records: &[Record]) -> Result<()> {
        let find = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let r = records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))?;
            if r.shape != shape {
                return Err(Error::Data(format!(
                    "tensor {name} has shape {:?}, network expects {shape:?}",
                    r.shape
                )));
            }
            Ok(r.to_f64())
        };
        for p in self.params.iter_mut() {
            let v = find(&p.name, &p.shape)?;
            p.values = Mat::from_shape_vec(p.values.dim(), v).expect("shape checked");
        }
        for (name, rs) in self.bn_names.iter().zip(self.bn_stats.iter_mut()) {
            rs.mean = find(&format!("{name}.running_mean"), &[rs.mean.len()])?;
            rs.var = find(&format!("{name}.running_var"), &[rs.var.len()])?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_records())
    }

    pub fn load(config: NetConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.load_records(&checkpoint::load(path)?)?;
        Ok(model)
    }
}
