use nalgebra::DMatrix;
use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<DMatrix<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DMatrix<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, bound: f64, rng: &mut R) -> ParamId {
        let value = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound));
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &DMatrix<f64> {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DMatrix<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn by_name(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    /// `||theta||^2` over every tensor.
    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v.norm_squared()).sum()
    }

    pub fn fill(&mut self, value: f64) {
        for v in &mut self.values {
            v.fill(value);
        }
    }

    /// Replaces every tensor with the same-named tensor of `other`.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::shape("parameter names differ"));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("parameter shapes differ"));
            }
            dst.copy_from(src);
        }
        Ok(())
    }

    /// Records every tensor as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.leaf(v.clone())).collect())
    }
}

/// Parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// One gradient per parameter tensor, in [`ParamSet`] order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<DMatrix<f64>> {
        self.0.iter().map(|v| grads.wrt(*v)).collect()
    }
}
