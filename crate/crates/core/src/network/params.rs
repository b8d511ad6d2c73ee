use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named network tensors in registration order. Buffers (batch-norm running
/// statistics) live alongside trainable parameters but never receive
/// gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            tensor,
            trainable,
        });
        Ok(())
    }

    fn slot(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.slot(name)?].tensor)
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.slot(name)?;
        let e = &mut self.entries[slot];
        if e.tensor.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "parameter update",
                lhs: e.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        e.tensor = tensor;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let slot = self.slot(name)?;
        Ok(&mut self.entries[slot].tensor)
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.entries[self.slot(name)?].trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(name, tensor, trainable)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.tensor, e.trainable))
    }

    /// Total trainable scalar count.
    pub fn num_trainable(&self) -> usize {
        self.iter()
            .filter(|(_, _, t)| *t)
            .map(|(_, t, _)| t.numel())
            .sum()
    }
}
