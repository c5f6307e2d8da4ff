//! Named parameter storage shared by the model, the optimizer, and the
//! checkpoint container.

use crate::error::{Result, VitapesError};
use crate::tensor::TensorF;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    value: Arc<TensorF>,
    trainable: bool,
}

/// Flat table of named tensors. Ordering is insertion order and is part of
/// the determinism contract (checkpoints and optimizer state follow it).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: TensorF, trainable: bool) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            value: Arc::new(value),
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Arc<TensorF> {
        &self.entries[id.0].value
    }

    pub fn tensor(&self, id: ParamId) -> &TensorF {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set(&mut self, id: ParamId, value: TensorF) {
        self.entries[id.0].value = Arc::new(value);
    }

    /// Mutable access without reallocating when this store holds the only
    /// reference (the optimizer's steady-state path).
    pub fn value_mut(&mut self, id: ParamId) -> &mut TensorF {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &TensorF)> {
        self.entries.iter().map(|e| (e.name.as_str(), &*e.value))
    }

    /// Replace values by name, requiring exact name and shape agreement.
    pub fn load_named(&mut self, tensors: &[(String, TensorF)]) -> Result<()> {
        for (name, t) in tensors {
            let id = self.find(name).ok_or_else(|| {
                VitapesError::Format(format!("checkpoint tensor `{}` has no matching parameter", name))
            })?;
            if self.tensor(id).shape() != t.shape() {
                return Err(VitapesError::Format(format!(
                    "checkpoint tensor `{}` shape {:?} does not match parameter shape {:?}",
                    name,
                    t.shape(),
                    self.tensor(id).shape()
                )));
            }
            self.set(id, t.clone());
        }
        Ok(())
    }

    /// Bit-exact snapshot of every tensor, for frozen-parameter assertions.
    pub fn snapshot_bits(&self) -> Vec<Vec<u64>> {
        self.entries
            .iter()
            .map(|e| e.value.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    pub fn bits_equal(&self, snapshot: &[Vec<u64>]) -> bool {
        if snapshot.len() != self.entries.len() {
            return false;
        }
        self.entries.iter().zip(snapshot).all(|(e, bits)| {
            e.value.len() == bits.len()
                && e.value
                    .data()
                    .iter()
                    .zip(bits)
                    .all(|(v, b)| v.to_bits() == *b)
        })
    }
}
