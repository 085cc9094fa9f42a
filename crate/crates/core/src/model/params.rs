use std::collections::HashMap;

use crate::error::{Result, StetError};
use crate::tensor::{NamedTensor, Tensor};

/// Named parameter tensors in a fixed creation order. The position of a tensor
/// in the store is its id on the autodiff tape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(StetError::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push(NamedTensor { name, tensor });
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(move |i| &mut self.tensors[i].tensor)
    }

    pub fn by_id(&self, id: usize) -> &NamedTensor {
        &self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter()
    }

    pub fn as_slice(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn as_mut_slice(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|p| p.tensor.is_finite())
    }

    /// `(name, Frobenius norm)` for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.tensors
            .iter()
            .map(|p| (p.name.clone(), p.tensor.frobenius_norm()))
            .collect()
    }

    /// Overwrites a tensor of identical shape.
    pub fn assign(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| StetError::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(StetError::dim("assign", slot.shape(), value.shape()));
        }
        slot.data_mut().copy_from_slice(value.data());
        Ok(())
    }
}
