//! Named parameter storage shared by every model component.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Handle to a tensor held in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors. Insertion order is the
/// serialization order, which keeps checkpoints stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            bail!(Contract, "duplicate parameter name `{name}`");
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    /// Adds a matrix with Glorot-uniform initialization.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.add(name, Tensor::uniform(&[rows, cols], bound, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        self.add(name, Tensor::filled(shape, value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from `other` for every name present in both stores.
    /// Returns how many tensors were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (_, name, t) in other.iter() {
            if let Some(id) = self.id(name) {
                if self.get(id).shape() != t.shape() {
                    bail!(
                        Checkpoint,
                        "shape mismatch for `{name}`: {:?} vs {:?}",
                        self.get(id).shape(),
                        t.shape()
                    );
                }
                *self.get_mut(id) = t.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}
