//! Two-substep training: a global substep (triplet loss, trunk + global
//! branch) followed by a local substep (keypoint and descriptor losses,
//! trunk + local branch) at every step.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_pairs, PairPool, Scan};
use crate::error::{Error, Result};
use crate::geometry::{augment_global, augment_local, GlobalAugmentation, LocalAugmentation, PointCloud, PoseSE3};
use crate::losses::{self, LossConfig};
use crate::model::{Branches, EgoNN, LocalOutput};
use crate::sparse_ad::checkpoint::{self, Record};
use crate::sparse_ad::params::round_to_f32;
use crate::sparse_ad::{ops, Group, Mat, NodeId, ParamStore, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Positive pairs per global substep; the batch holds twice as many clouds.
    pub global_pairs: usize,
    /// Positive pairs per local substep.
    pub local_pairs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Checkpoint every this many steps (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Largest translation of the local-substep augmentation, meters.
    pub local_max_translation: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            global_pairs: 8,
            local_pairs: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 15,
            steps_per_epoch: 100,
            checkpoint_every: 0,
            seed: 0,
            local_max_translation: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            global_pairs: 128,
            local_pairs: 1,
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.global_pairs < 2 {
            return Err(Error::Config("train.global_pairs must be at least 2 for mining".into()));
        }
        if self.local_pairs == 0 {
            return Err(Error::Config("train.local_pairs must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be finite and non-negative".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(Error::Config("train adam betas must be in [0, 1) and eps positive".into()));
        }
        Ok(())
    }
}

/// Adam moments for the parameters of some groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub groups: Vec<Group>,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, groups: &[Group]) -> Self {
        Self {
            groups: groups.to_vec(),
            m: params.iter().map(|p| Mat::zeros(p.values.dim())).collect(),
            v: params.iter().map(|p| Mat::zeros(p.values.dim())).collect(),
            t: 0,
        }
    }

    /// One update from the accumulated gradients. State is kept
    /// representable in `f32` so checkpoints reproduce it exactly.
    pub fn step(&mut self, params: &mut ParamStore, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if !self.groups.contains(&p.group) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(&mut p.values)
                .and(&p.grad)
                .and(&mut *m)
                .and(&mut *v)
                .for_each(|w, &g, m, v| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= cfg.lr * mh / (vh.sqrt() + cfg.adam_eps);
                });
            round_to_f32(&mut p.values);
            round_to_f32(m);
            round_to_f32(v);
            if p.values.iter().any(|w| !w.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {} after optimizer step", p.name)));
            }
        }
        Ok(())
    }

    fn to_records(&self, prefix: &str, params: &ParamStore) -> Vec<Record> {
        let mut out = vec![Record::new(format!("{prefix}.t"), vec![2], split_u64(self.t))];
        for (i, p) in params.iter().enumerate() {
            out.push(Record::from_f64(format!("{prefix}.m.{}", p.name), p.shape.clone(), self.m[i].iter().copied()));
            out.push(Record::from_f64(format!("{prefix}.v.{}", p.name), p.shape.clone(), self.v[i].iter().copied()));
        }
        out
    }

    fn load_records(&mut self, prefix: &str, params: &ParamStore, records: &[Record]) -> Result<()> {
        let find = |name: String| {
            records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks optimizer tensor {name}")))
        };
        self.t = join_u64(&find(format!("{prefix}.t"))?.values);
        for (i, p) in params.iter().enumerate() {
            let dim = p.values.dim();
            for (store, kind) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                let r = find(format!("{prefix}.{kind}.{}", p.name))?;
                *store = Mat::from_shape_vec(dim, r.to_f64())
                    .map_err(|_| Error::Data(format!("optimizer tensor {} has the wrong size", r.name)))?;
            }
        }
        Ok(())
    }
}

// f32 holds integers exactly up to 2^24, so counters are stored as two halves
fn split_u64(v: u64) -> Vec<f32> {
    vec![(v & 0xFF_FFFF) as f32, ((v >> 24) & 0xFF_FFFF) as f32]
}

fn join_u64(v: &[f32]) -> u64 {
    let lo = v.first().copied().unwrap_or(0.0) as u64;
    let hi = v.get(1).copied().unwrap_or(0.0) as u64;
    lo | (hi << 24)
}

/// Scalars logged for one step. Missing values mean the term was skipped.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepLog {
    pub step: usize,
    pub global_loss: Option<f64>,
    pub active_triplets: usize,
    pub chamfer: f64,
    pub p2p: f64,
    pub descriptor: Option<f64>,
}

pub const TRAIN_LOG_HEADER: &str = "step,global_loss,active_triplets,chamfer,p2p,descriptor";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        format!(
            "{},{},{},{:.9e},{:.9e},{}",
            self.step,
            opt(self.global_loss),
            self.active_triplets,
            self.chamfer,
            self.p2p,
            opt(self.descriptor)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.steps {
            writeln!(s, "{}", r.csv_row()).expect("string write");
        }
        s
    }
}

/// Training clouds with their poses and pair pool.
pub struct TrainSet {
    pub clouds: Vec<PointCloud>,
    pub poses: Vec<PoseSE3>,
    pub pool: PairPool,
}

impl TrainSet {
    pub fn new(scans: Vec<Scan>, loss: &LossConfig) -> Result<Self> {
        let poses: Vec<PoseSE3> = scans.iter().map(|s| s.pose.clone()).collect();
        let pool = sample_pairs(&poses, loss.positive_dist, loss.negative_dist)?;
        if pool.negatives.is_empty() {
            return Err(Error::Data(format!(
                "no scan pairs farther apart than {} m; training needs negatives",
                loss.negative_dist
            )));
        }
        Ok(Self {
            clouds: scans.into_iter().map(|s| s.cloud).collect(),
            poses,
            pool,
        })
    }
}

fn grad_norm(params: &ParamStore, group: Group) -> f64 {
    params
        .iter()
        .filter(|p| p.group == group)
        .map(|p| p.grad.iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Outcome of a global substep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalStep {
    pub loss: f64,
    pub active_triplets: usize,
    pub trunk_grad_norm: f64,
}

/// Outcome of a local substep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalStep {
    pub chamfer: f64,
    pub p2p: f64,
    pub descriptor: Option<f64>,
    pub correspondences: usize,
    pub trunk_grad_norm: f64,
}

/// Summed local loss over a batch of pairs plus its scalar components.
#[derive(Debug, Clone, Copy)]
pub struct LocalLossGraph {
    pub total: NodeId,
    pub chamfer: f64,
    pub p2p: f64,
    pub descriptor: Option<f64>,
    pub correspondences: usize,
}

/// Builds the keypoint and descriptor losses for `pairs`, whose clouds were
/// forwarded as consecutive batch elements `2k` and `2k + 1`.
pub fn local_loss_graph(
    tape: &mut Tape,
    local: &LocalOutput,
    pairs: &[(PointCloud, PointCloud, PoseSE3)],
    cfg: &LossConfig,
) -> LocalLossGraph {
    let mut terms = Vec::new();
    let (mut chamfer_v, mut p2p_v, mut desc_v, mut desc_n, mut corr) = (0.0, 0.0, 0.0, 0, 0);
    for (k, (a, b, b_to_a)) in pairs.iter().enumerate() {
        let (ra, rb) = (local.rows(2 * k), local.rows(2 * k + 1));
        let qa = ops::gather_rows(tape, local.positions, ra.clone());
        let qb = ops::gather_rows(tape, local.positions, rb.clone());
        let sa = ops::gather_rows(tape, local.saliency, ra.clone());
        let sb = ops::gather_rows(tape, local.saliency, rb.clone());
        let qb_in_a = ops::transform_points(tape, qb, b_to_a);
        let chamfer = losses::chamfer_loss(tape, qa, qb_in_a, sa, sb);
        let pa = losses::p2p_loss(tape, qa, &a.points);
        let pb = losses::p2p_loss(tape, qb, &b.points);
        let p2p = ops::add(tape, pa, pb);
        let gt = losses::gt_correspondences(tape.value(qa), tape.value(qb), b_to_a, cfg.corr_radius);
        corr += gt.len();
        let desc = if gt.is_empty() {
            log::debug!("local substep: no ground-truth correspondences, descriptor loss skipped");
            None
        } else {
            let da = ops::gather_rows(tape, local.descriptors, ra);
            let db = ops::gather_rows(tape, local.descriptors, rb);
            let c = losses::correspondence_matrix(tape, da, db, &gt.rows);
            Some(losses::descriptor_loss(tape, c, &gt.nn, cfg.temperature))
        };
        chamfer_v += tape.scalar(chamfer);
        p2p_v += tape.scalar(p2p);
        if let Some(d) = desc {
            desc_v += tape.scalar(d);
            desc_n += 1;
        }
        terms.push(losses::total_local_loss(tape, chamfer, p2p, desc, cfg));
    }
    let weighted: Vec<_> = terms.iter().map(|t| (*t, 1.0)).collect();
    LocalLossGraph {
        total: ops::weighted_sum(tape, &weighted),
        chamfer: chamfer_v,
        p2p: p2p_v,
        descriptor: (desc_n > 0).then_some(desc_v),
        correspondences: corr,
    }
}

pub struct Trainer {
    pub model: EgoNN,
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub global_adam: Adam,
    pub local_adam: Adam,
    /// Steps completed.
    pub step: usize,
    pub log: TrainLog,
}

impl Trainer {
    pub fn new(model: EgoNN, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let global_adam = Adam::new(&model.params, &[Group::Trunk, Group::Global]);
        let local_adam = Adam::new(&model.params, &[Group::Trunk, Group::Local]);
        Ok(Self {
            model,
            config,
            loss,
            global_adam,
            local_adam,
            step: 0,
            log: TrainLog::default(),
        })
    }

    /// Random stream of one step, independent of how the run was resumed.
    fn step_rng(&self, step: usize, substep: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream((step as u64) * 2 + substep);
        rng
    }

    /// Triplet substep on the given clouds (already augmented) and positions.
    pub fn global_substep(&mut self, clouds: &[PointCloud], positions: &[Vector3<f64>]) -> Result<Option<GlobalStep>> {
        let (pos, neg) = losses::pose_masks(positions, &self.loss);
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, clouds, Branches::Global, true)?;
        let emb = out.global.expect("global branch requested");
        let triplets = losses::mine_batch_hard(tape.value(emb), &pos, &neg);
        if triplets.is_empty() {
            log::info!("global substep skipped: no valid triplets in batch");
            return Ok(None);
        }
        let ev = tape.value(emb).clone();
        let active = triplets
            .iter()
            .filter(|t| {
                let r = |i: usize| ev.row(i).to_vec();
                losses::triplet_value(&r(t.anchor), &r(t.positive), &r(t.negative), self.loss.margin) > 0.0
            })
            .count();
        let loss = losses::triplet_loss(&mut tape, emb, &triplets, self.loss.margin);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("global loss {value}")));
        }
        self.model.params.zero_grad();
        tape.backward(loss).accumulate_into(&mut self.model.params);
        let trunk_grad_norm = grad_norm(&self.model.params, Group::Trunk);
        self.global_adam.step(&mut self.model.params, &self.config)?;
        self.model.apply_bn_updates(&out.bn_updates);
        Ok(Some(GlobalStep {
            loss: value,
            active_triplets: active,
            trunk_grad_norm,
        }))
    }

    /// Keypoint substep on clouds `a` and `b`, where `b_to_a` maps b-frame
    /// points into a's frame exactly.
    pub fn local_substep(&mut self, pairs: &[(PointCloud, PointCloud, PoseSE3)]) -> Result<LocalStep> {
        let mut clouds = Vec::with_capacity(pairs.len() * 2);
        for (a, b, _) in pairs {
            clouds.push(a.clone());
            clouds.push(b.clone());
        }
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, &clouds, Branches::Local, true)?;
        let local = out.local.as_ref().expect("local branch requested");
        let graph = local_loss_graph(&mut tape, local, pairs, &self.loss);
        let total = graph.total;
        let value = tape.scalar(total);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("local loss {value}")));
        }
        self.model.params.zero_grad();
        tape.backward(total).accumulate_into(&mut self.model.params);
        let trunk_grad_norm = grad_norm(&self.model.params, Group::Trunk);
        self.local_adam.step(&mut self.model.params, &self.config)?;
        self.model.apply_bn_updates(&out.bn_updates);
        Ok(LocalStep {
            chamfer: graph.chamfer,
            p2p: graph.p2p,
            descriptor: graph.descriptor,
            correspondences: graph.correspondences,
            trunk_grad_norm,
        })
    }

    /// Draws `n` positive pairs, preferring pairs that share no scan.
    fn draw_pairs<R: Rng>(pool: &PairPool, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..pool.positives.len()).collect();
        order.shuffle(rng);
        let mut used = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(n);
        for &k in &order {
            let (i, j) = pool.positives[k];
            if !used.contains(&i) && !used.contains(&j) {
                used.insert(i);
                used.insert(j);
                out.push(if rng.random_bool(0.5) { (i, j) } else { (j, i) });
                if out.len() == n {
                    break;
                }
            }
        }
        out
    }

    /// One full training step on `data`.
    pub fn train_step(&mut self, data: &TrainSet) -> Result<StepLog> {
        let step = self.step;
        let mut rng = self.step_rng(step, 0);
        let pairs = Self::draw_pairs(&data.pool, self.config.global_pairs, &mut rng);
        let ids: Vec<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
        let aug = GlobalAugmentation::default();
        let clouds: Vec<PointCloud> = ids.iter().map(|&i| augment_global(&data.clouds[i], &mut rng, &aug)).collect();
        let positions: Vec<Vector3<f64>> = ids.iter().map(|&i| data.poses[i].translation).collect();
        let global = self
            .global_substep(&clouds, &positions)
            .map_err(|e| annotate(e, step, "global", &ids))?;

        let mut rng = self.step_rng(step, 1);
        let pairs = Self::draw_pairs(&data.pool, self.config.local_pairs, &mut rng);
        let aug = LocalAugmentation {
            max_translation: self.config.local_max_translation,
            ..LocalAugmentation::default()
        };
        let local_ids: Vec<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
        let triples: Vec<(PointCloud, PointCloud, PoseSE3)> = pairs
            .iter()
            .map(|&(i, j)| {
                let (b, delta) = augment_local(&data.clouds[j], &mut rng, &aug);
                let b_to_a = PoseSE3::relative(&data.poses[i], &data.poses[j]).compose(&delta.inverse());
                (data.clouds[i].clone(), b, b_to_a)
            })
            .collect();
        let local = self
            .local_substep(&triples)
            .map_err(|e| annotate(e, step, "local", &local_ids))?;

        let entry = StepLog {
            step: step + 1,
            global_loss: global.map(|g| g.loss),
            active_triplets: global.map(|g| g.active_triplets).unwrap_or(0),
            chamfer: local.chamfer,
            p2p: local.p2p,
            descriptor: local.descriptor,
        };
        self.step += 1;
        self.log.steps.push(entry.clone());
        Ok(entry)
    }

    /// Runs until `total` steps are complete, calling `on_step` after each.
    pub fn run_until<F>(&mut self, data: &TrainSet, total: usize, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepLog) -> Result<()>,
    {
        while self.step < total {
            let entry = self.train_step(data)?;
            on_step(self, &entry)?;
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut out = self.model.to_records();
        out.extend(self.global_adam.to_records("optim.global", &self.model.params));
        out.extend(self.local_adam.to_records("optim.local", &self.model.params));
        out.push(Record::new("trainer.step", vec![2], split_u64(self.step as u64)));
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_records())
    }

    /// Restores model, optimizer state and step counter. The log restarts
    /// empty; rows continue from the restored step.
    pub fn resume(path: &Path, model: EgoNN, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        let records = checkpoint::load(path)?;
        let mut t = Self::new(model, config, loss)?;
        t.model.load_records(&records)?;
        t.global_adam.load_records("optim.global", &t.model.params, &records)?;
        t.local_adam.load_records("optim.local", &t.model.params, &records)?;
        let step = records
            .iter()
            .find(|r| r.name == "trainer.step")
            .ok_or_else(|| Error::Data("checkpoint lacks trainer.step".into()))?;
        t.step = join_u64(&step.values) as usize;
        Ok(t)
    }
}

fn annotate(e: Error, step: usize, substep: &str, ids: &[usize]) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {} ({substep} substep, scans {ids:?})", step + 1)),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_survive_f32_storage() {
        for v in [0u64, 1, 12345, (1 << 40) + 7] {
            assert_eq!(join_u64(&split_u64(v)), v);
        }
    }

    #[test]
    fn adam_zero_lr_keeps_parameters() {
        let model = EgoNN::new(crate::model::NetConfig::toy(), 0).unwrap();
        let mut params = model.params.clone();
        for p in params.iter_mut() {
            p.grad.fill(0.5);
        }
        let before = params.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&params, &[Group::Trunk]);
        adam.step(&mut params, &cfg).unwrap();
        for (a, b) in params.iter().zip(before.iter()) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn adam_updates_only_its_groups() {
        let model = EgoNN::new(crate::model::NetConfig::toy(), 0).unwrap();
        let mut params = model.params.clone();
        for p in params.iter_mut() {
            p.grad.fill(1.0);
        }
        let before = params.clone();
        let mut adam = Adam::new(&params, &[Group::Local]);
        adam.step(&mut params, &TrainConfig::default()).unwrap();
        for (a, b) in params.iter().zip(before.iter()) {
            assert_eq!(a.values != b.values, a.group == Group::Local, "{}", a.name);
        }
    }
}
