use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flat coordinate access used by finite differences.
    pub fn coord_mut(&mut self, mut flat: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if flat < t.len() {
                return &mut t.data_mut()[flat];
            }
            flat -= t.len();
        }
        panic!("coordinate out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
