use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensorcore::Matrix;

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, each paired with a gradient buffer of the same shape.
///
/// Registration order is stable and defines the checkpoint blob order.
/// `version` increases on every mutable access to a value, which lets forward
/// caches detect that parameters moved underneath them.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
    index: HashMap<String, usize>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter key {name}")));
        }
        if !value.is_finite() {
            return Err(Error::NonFiniteInput(format!("initial value of {name}")));
        }
        let id = self.values.len();
        self.grads.push(Matrix::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.version += 1;
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        self.version += 1;
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    /// Mutable value and gradient of the same tensor.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Matrix, &Matrix) {
        self.version += 1;
        (&mut self.values[id.0], &self.grads[id.0])
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt()
    }

    /// Rescale every gradient so the global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if max_norm > 0.0 && norm > max_norm {
            let s = max_norm / norm;
            for g in &mut self.grads {
                g.scale(s);
            }
        }
        norm
    }

    /// Copy all values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::ConfigMismatch("parameter layouts differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::ConfigMismatch("parameter shapes differ".into()));
            }
            dst.as_mut_slice().copy_from_slice(src.as_slice());
        }
        self.version += 1;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}
