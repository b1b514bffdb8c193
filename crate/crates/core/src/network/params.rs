use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named model tensors. `params` are trainable; `buffers` hold batch-norm
/// running statistics. Both maps iterate in key order, which fixes the order
/// of every derived computation (optimizer steps, checkpoints).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown buffer `{name}`")))
    }

    pub fn num_trainable(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Trainable parameter count restricted to names under `prefix`.
    pub fn num_trainable_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().chain(self.buffers.values()).all(Tensor::all_finite)
    }
}
