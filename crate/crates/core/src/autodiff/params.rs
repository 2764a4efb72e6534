use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics if the name is already taken, since that
    /// indicates two layers were built with the same prefix.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let id = ParamId(self.values.len());
        let prev = self.lookup.insert(name.clone(), id);
        assert!(prev.is_none(), "parameter {name} registered twice");
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Replaces every value with the tensor of the same name in `other`.
    pub fn load_from(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                )));
            }
            self.values[id.0] = value;
        }
        Ok(())
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn add_into(&mut self, id: ParamId, g: &[f64]) {
        self.grads[id.0].data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}
