//! Reverse-mode tape over dense feature matrices.
//!
//! Every node holds a row-major `Mat`. Operations append nodes together with
//! a backward closure that maps the output gradient to gradients of the
//! parents. Nodes are only ever appended, so the node order is a
//! topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Copies `rows` of `m` (repeats allowed) into a new matrix. Same result as
/// `select(Axis(0), ..)`, which goes through a generic concatenate and is
/// several times slower on long index lists.
pub fn take_rows(m: ArrayView2<'_, f64>, rows: &[usize]) -> Mat {
    let c = m.ncols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        let row = m.row(r);
        match row.as_slice() {
            Some(s) => data.extend_from_slice(s),
            None => data.extend(row.iter()),
        }
    }
    Mat::from_shape_vec((rows.len(), c), data).expect("rows × cols")
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

/// `(grad_out, parent values, parent needs grad) -> parent grads`.
pub type BackwardFn = Box<dyn Fn(&Mat, &[&Mat], &[bool]) -> Vec<Option<Mat>>>;

struct Node {
    value: Mat,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    frozen: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape on which parameters enter as constants: no backward closures are
    /// recorded, which is what inference wants.
    pub fn frozen() -> Self {
        Self {
            frozen: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    /// Leaf bound to a parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(node) = self.param_nodes.get(&id) {
            return *node;
        }
        let values = store.get(id).values.clone();
        let node = if self.frozen { self.constant(values) } else { self.leaf(values) };
        self.param_nodes.insert(id, node);
        node
    }

    pub fn op(&mut self, value: Mat, parents: Vec<NodeId>, backward: BackwardFn) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node is not a scalar");
        v[[0, 0]]
    }

    /// Reverse sweep from a scalar node. Gradients are retained for leaves only.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_values: Vec<&Mat> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = backward(&g, &parent_values, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else {
                    continue;
                };
                debug_assert_eq!(pg.dim(), self.nodes[p.0].value.dim(), "gradient shape mismatch");
                match &mut grads[p.0] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adds leaf gradients into `Parameter::grad` of every parameter used on the tape.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (pid, node) in &self.param_nodes {
            if let Some(g) = self.get(*node) {
                store.get_mut(*pid).grad += g;
            }
        }
    }
}
