//! Dense row-wise operations recorded on a [`Tape`].

use ndarray::{s, Array2, Axis};

use super::tape::{take_rows, Mat, NodeId, Tape};
use crate::geometry::PoseSE3;

/// Floor on row norms in [`Activation::L2NormRows`].
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
    Sigmoid,
    L2NormRows,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn activation(tape: &mut Tape, x: NodeId, kind: Activation) -> NodeId {
    let xv = tape.value(x);
    match kind {
        Activation::Relu => {
            let y = xv.mapv(|v| v.max(0.0));
            tape.op(
                y,
                vec![x],
                Box::new(|g, p, _| {
                    let mut gx = g.clone();
                    gx.zip_mut_with(p[0], |gi, &xi| {
                        if xi <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    vec![Some(gx)]
                }),
            )
        }
        Activation::Tanh => {
            let y = xv.mapv(f64::tanh);
            let saved = y.clone();
            tape.op(
                y,
                vec![x],
                Box::new(move |g, _, _| {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&saved, |gi, &yi| *gi *= 1.0 - yi * yi);
                    vec![Some(gx)]
                }),
            )
        }
        Activation::Softplus => {
            let y = xv.mapv(softplus);
            tape.op(
                y,
                vec![x],
                Box::new(|g, p, _| {
                    let mut gx = g.clone();
                    gx.zip_mut_with(p[0], |gi, &xi| *gi *= sigmoid(xi));
                    vec![Some(gx)]
                }),
            )
        }
        Activation::Sigmoid => {
            let y = xv.mapv(sigmoid);
            let saved = y.clone();
            tape.op(
                y,
                vec![x],
                Box::new(move |g, _, _| {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&saved, |gi, &yi| *gi *= yi * (1.0 - yi));
                    vec![Some(gx)]
                }),
            )
        }
        Activation::L2NormRows => {
            let norms: Vec<f64> = xv.rows().into_iter().map(|r| r.dot(&r).sqrt().max(L2_EPS)).collect();
            let mut y = xv.clone();
            for (mut row, n) in y.rows_mut().into_iter().zip(&norms) {
                row /= *n;
            }
            let saved = y.clone();
            tape.op(
                y,
                vec![x],
                Box::new(move |g, p, _| {
                    let mut gx = g.clone();
                    for (((mut gr, yr), xr), n) in gx
                        .rows_mut()
                        .into_iter()
                        .zip(saved.rows())
                        .zip(p[0].rows())
                        .zip(&norms)
                    {
                        if xr.dot(&xr).sqrt() > L2_EPS {
                            let d = yr.dot(&gr);
                            gr.zip_mut_with(&yr, |gi, &yi| *gi -= d * yi);
                        }
                        gr /= *n;
                    }
                    vec![Some(gx)]
                }),
            )
        }
    }
}

pub fn add(tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    assert_eq!(tape.value(a).dim(), tape.value(b).dim(), "add: shape mismatch");
    let y = tape.value(a) + tape.value(b);
    tape.op(y, vec![a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]))
}

/// `Σ wᵢ · xᵢ` over same-shaped nodes.
/// `x + c` elementwise.
pub fn add_scalar(tape: &mut Tape, x: NodeId, c: f64) -> NodeId {
    let v = tape.value(x) + c;
    tape.op(v, vec![x], Box::new(|g, _, _| vec![Some(g.clone())]))
}

pub fn weighted_sum(tape: &mut Tape, terms: &[(NodeId, f64)]) -> NodeId {
    assert!(!terms.is_empty());
    let mut y = Mat::zeros(tape.value(terms[0].0).dim());
    for (n, w) in terms {
        y.scaled_add(*w, tape.value(*n));
    }
    let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
    tape.op(
        y,
        terms.iter().map(|t| t.0).collect(),
        Box::new(move |g, _, _| weights.iter().map(|w| Some(g * *w)).collect()),
    )
}

/// Sum of all entries as a 1×1 node.
pub fn sum_all(tape: &mut Tape, x: NodeId) -> NodeId {
    let s = tape.value(x).sum();
    tape.op(
        Mat::from_elem((1, 1), s),
        vec![x],
        Box::new(|g, p, _| vec![Some(Mat::from_elem(p[0].dim(), g[[0, 0]]))]),
    )
}

/// `x · W + b` with `W: C_in × C_out` and `b: 1 × C_out`.
pub fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
    let mut y = tape.value(x).dot(tape.value(w));
    let mut parents = vec![x, w];
    if let Some(b) = b {
        y += tape.value(b);
        parents.push(b);
    }
    tape.op(
        y,
        parents,
        Box::new(|g, p, need| {
            let gx = need[0].then(|| g.dot(&p[1].t()));
            let gw = need[1].then(|| p[0].t().dot(g));
            let mut out = vec![gx, gw];
            if p.len() == 3 {
                out.push(need[2].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0))));
            }
            out
        }),
    )
}

/// Selects rows of `x` (indices may repeat).
pub fn gather_rows(tape: &mut Tape, x: NodeId, rows: Vec<usize>) -> NodeId {
    let y = take_rows(tape.value(x).view(), &rows);
    tape.op(
        y,
        vec![x],
        Box::new(move |g, p, _| {
            let mut gx = Mat::zeros(p[0].dim());
            for (i, &r) in rows.iter().enumerate() {
                let mut row = gx.row_mut(r);
                row += &g.row(i);
            }
            vec![Some(gx)]
        }),
    )
}

/// `a · bᵀ`.
pub fn matmul_nt(tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    let y = tape.value(a).dot(&tape.value(b).t());
    tape.op(
        y,
        vec![a, b],
        Box::new(|g, p, need| {
            vec![
                need[0].then(|| g.dot(p[1])),
                need[1].then(|| g.t().dot(p[0])),
            ]
        }),
    )
}

/// Applies a fixed rigid transform to the rows of an `N × 3` node.
pub fn transform_points(tape: &mut Tape, x: NodeId, pose: &PoseSE3) -> NodeId {
    let r = Array2::from_shape_fn((3, 3), |(i, j)| pose.rotation[(i, j)]);
    let t = Array2::from_shape_fn((1, 3), |(_, j)| pose.translation[j]);
    let y = tape.value(x).dot(&r.t()) + &t;
    tape.op(y, vec![x], Box::new(move |g, _, _| vec![Some(g.dot(&r))]))
}

/// Column slice `[start, end)` of `x`.
pub fn slice_cols(tape: &mut Tape, x: NodeId, start: usize, end: usize) -> NodeId {
    let y = tape.value(x).slice(s![.., start..end]).to_owned();
    tape.op(
        y,
        vec![x],
        Box::new(move |g, p, _| {
            let mut gx = Mat::zeros(p[0].dim());
            gx.slice_mut(s![.., start..end]).assign(g);
            vec![Some(gx)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn activation_ranges() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[-30.0, -1.0, 0.0, 2.0, 40.0]]);
        let t = activation(&mut tape, x, Activation::Tanh);
        assert!(tape.value(t).iter().all(|v| v.abs() <= 1.0));
        let s = activation(&mut tape, x, Activation::Softplus);
        assert!(tape.value(s).iter().all(|v| *v > 0.0));
        let n = activation(&mut tape, x, Activation::L2NormRows);
        let norm: f64 = tape.value(n).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) > 0.0 || softplus(-800.0) == 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sum_of_inputs_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let s = sum_all(&mut tape, x);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x).unwrap(), &Mat::ones((2, 2)));
    }

    #[test]
    fn identity_linear_passes_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, -2.0, 3.0]]);
        let w = tape.constant(Mat::eye(3));
        let b = tape.constant(Mat::zeros((1, 3)));
        let y = linear(&mut tape, x, w, Some(b));
        assert_eq!(tape.value(y), tape.value(x));
    }
}
