//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

/// Denominator floor of the per-coordinate relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Upper bound on checked coordinates (sampled when exceeded, never below 64).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(build: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss {v} during gradient check")));
    }
    Ok(v)
}

/// Compares the tape gradient of `build`'s scalar output w.r.t. every
/// parameter of `store` against central differences.
pub fn grad_check<F>(build: F, store: &ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &work)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    tape.backward(loss).accumulate_into(&mut work);
    let analytic = work.clone();

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect();
    let budget = cfg.max_coords.max(64);
    let chosen: Vec<(ParamId, usize)> = if coords.len() <= budget {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, coords.len(), budget).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    };

    let mut max_rel_err: f64 = 0.0;
    for &(id, i) in &chosen {
        let orig = work.get(id).values.as_slice().expect("standard layout")[i];
        work.get_mut(id).values.as_slice_mut().expect("standard layout")[i] = orig + cfg.step;
        let plus = evaluate(&build, &work)?;
        work.get_mut(id).values.as_slice_mut().expect("standard layout")[i] = orig - cfg.step;
        let minus = evaluate(&build, &work)?;
        work.get_mut(id).values.as_slice_mut().expect("standard layout")[i] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic.get(id).grad.as_slice().expect("standard layout")[i];
        max_rel_err = max_rel_err.max(relative_error(a, numeric));
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked: chosen.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_ad::ops;
    use crate::sparse_ad::params::{Group, Parameter};
    use ndarray::Array2;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut store = ParamStore::new();
        let values = Array2::from_shape_fn((10, 10), |(i, j)| (i as f64 - 3.0) * 0.1 + j as f64 * 0.05);
        let id = store.add(Parameter::new("x", vec![10, 10], values, Group::Trunk));
        let report = grad_check(
            |tape, store| {
                let x = tape.param(store, id);
                let sq = ops::matmul_nt(tape, x, x);
                Ok(ops::sum_all(tape, sq))
            },
            &store,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 100);
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn independent_parameter_has_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add(Parameter::new("a", vec![2], Array2::ones((1, 2)), Group::Trunk));
        let b = store.add(Parameter::new("b", vec![2], Array2::ones((1, 2)), Group::Trunk));
        let mut tape = Tape::new();
        let an = tape.param(&store, a);
        let _ = tape.param(&store, b);
        let loss = ops::sum_all(&mut tape, an);
        tape.backward(loss).accumulate_into(&mut store);
        assert!(store.get(b).grad.iter().all(|g| *g == 0.0));
        assert!(store.get(a).grad.iter().all(|g| *g == 1.0));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        let id = store.add(Parameter::new("x", vec![1], Array2::from_elem((1, 1), f64::NAN), Group::Trunk));
        let result = grad_check(
            |tape, store| {
                let x = tape.param(store, id);
                Ok(ops::sum_all(tape, x))
            },
            &store,
            &GradCheckConfig::default(),
        );
        assert!(matches!(result, Err(Error::NonFinite(_))));
    }
}
