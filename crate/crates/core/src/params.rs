//! Named trainable tensors with explicit sharing.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default init std for weights; biases start at zero.
pub const INIT_STD: f64 = 0.1;

/// Stable handle to a [`ParamStore`] entry.
///
/// Every module that reuses a parameter holds the same id, so all usage
/// sites observe the one underlying tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Scales the gradient in the optimizer step and nowhere else.
    pub grad_multiplier: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
}

pub enum Init {
    Zeros,
    TruncatedNormal(f64),
    Value(Tensor),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the existing entry for `name`, or registers a new one.
    ///
    /// A second registration under the same name must agree on shape and
    /// yields the same [`ParamId`].
    pub fn get_or_insert<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        if let Some(&id) = self.index.get(name) {
            let existing = self.entries[id.0].value.shape();
            if existing != shape {
                return Err(Error::shape("param", existing, shape));
            }
            return Ok(id);
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::TruncatedNormal(std) => Tensor::truncated_normal(shape, std, rng),
            Init::Value(t) => {
                if t.shape() != shape {
                    return Err(Error::shape("param", t.shape(), shape));
                }
                t
            }
        };
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            grad: Tensor::zeros(shape),
            value,
            grad_multiplier: 1.0,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    /// Gradient as the optimizer consumes it: `grad_multiplier · grad`.
    pub fn effective_grad(&self, id: ParamId) -> Vec<f64> {
        let e = &self.entries[id.0];
        e.grad.data().iter().map(|g| e.grad_multiplier * g).collect()
    }

    pub fn set_grad_multiplier(&mut self, id: ParamId, multiplier: f64) {
        self.entries[id.0].grad_multiplier = multiplier;
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let slot = self.entries[id.0].grad.data_mut();
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Snapshot of all values, keyed by name.
    pub fn to_checkpoint(&self) -> BTreeMap<String, Tensor> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }

    /// Overwrites values from a checkpoint map. Every registered parameter
    /// must be present with a matching shape; extra names are rejected.
    pub fn load_checkpoint(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in values.keys() {
            if !self.index.contains_key(name) {
                return Err(Error::Config(format!("unknown parameter `{name}` in checkpoint")));
            }
        }
        for e in &mut self.entries {
            let v = values
                .get(&e.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{}`", e.name)))?;
            if v.shape() != e.value.shape() {
                return Err(Error::shape("checkpoint", e.value.shape(), v.shape()));
            }
            e.value = v.clone();
        }
        Ok(())
    }
}

/// Serializable parameter record used by checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}
