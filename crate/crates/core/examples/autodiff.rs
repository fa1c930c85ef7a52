//! A two-layer sparse convolution built on the tape, differentiated and
//! checked against central finite differences.

use std::sync::Arc;

use egonn::geometry::VoxelCoord;
use egonn::sparse_ad::layers::{sparse_activation, sparse_conv, SparseTensor};
use egonn::sparse_ad::{grad_check, ops, Activation, CoordSet, GradCheckConfig, Group, ParamStore, Parameter, Tape};
use egonn::sparse_ad::params::he_normal;
use rand::SeedableRng;

fn main() -> egonn::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let voxels: Vec<VoxelCoord> = (0..40).map(|i| VoxelCoord::new(0, i % 5, (i * 7) % 16, i % 3)).collect();
    let coords = Arc::new(CoordSet::from_voxels(voxels, 16, true, 1));
    let mut store = ParamStore::new();
    let w1 = store.add(Parameter::new("w1", vec![27, 1, 4], he_normal(&mut rng, 27, 4, 27), Group::Trunk));
    let w2 = store.add(Parameter::new("w2", vec![27, 4, 2], he_normal(&mut rng, 27 * 4, 2, 108), Group::Trunk));

    let build = |tape: &mut Tape, store: &ParamStore| {
        let ones = tape.constant(egonn::sparse_ad::Mat::ones((coords.len(), 1)));
        let x = SparseTensor::new(tape, coords.clone(), ones);
        let (k1, k2) = (tape.param(store, w1), tape.param(store, w2));
        let h = sparse_conv(tape, &x, k1, 3);
        let h = sparse_activation(tape, &h, Activation::Tanh);
        let y = sparse_conv(tape, &h, k2, 3);
        Ok(ops::sum_all(tape, y.feats))
    };

    let mut tape = Tape::new();
    let loss = build(&mut tape, &store)?;
    let grads = tape.backward(loss);
    println!("{} voxels, loss {:.6}, tape of {} nodes", coords.len(), tape.scalar(loss), tape.len());
    grads.accumulate_into(&mut store);
    println!("|dL/dw1| = {:.4}", store.get(w1).grad.iter().map(|g| g * g).sum::<f64>().sqrt());

    let report = grad_check(build, &store, &GradCheckConfig::default())?;
    println!("finite differences: max relative error {:.2e} over {} coordinates", report.max_rel_err, report.checked);
    Ok(())
}
