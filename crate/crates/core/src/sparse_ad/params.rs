use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::Mat;

/// Which part of the network a parameter belongs to. The global and local
/// training substeps each update the trunk plus their own branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Trunk,
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    /// Logical shape written to checkpoints; `values` is its 2-D view.
    pub shape: Vec<usize>,
    pub values: Mat,
    pub grad: Mat,
    pub group: Group,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Mat, group: Group) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "shape/value size mismatch");
        let grad = Array2::zeros(values.dim());
        Self {
            name: name.into(),
            shape,
            values,
            grad,
            group,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, param: Parameter) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != param.name),
            "duplicate parameter name {}",
            param.name
        );
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }
}

/// He-normal initialization `N(0, 2 / fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Rounds every entry to the nearest `f32`, so checkpoints stored in single
/// precision reproduce the in-memory state exactly.
pub fn round_to_f32(m: &mut Mat) {
    m.mapv_inplace(|v| v as f32 as f64);
}
