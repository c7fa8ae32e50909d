//! Named parameter registry: stable ordering for optimizer updates,
//! checkpointing, and gradient checking.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, name-unique collection of trainable tensors. Shared parameters
/// (same underlying storage under two owners) are registered once.
#[derive(Default)]
pub struct NamedParams {
    entries: Vec<(String, Tensor)>,
}

impl NamedParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        if self.entries.iter().any(|(_, e)| e.ptr_id() == t.ptr_id()) {
            return; // already registered through a sharing owner
        }
        self.entries.push((name, t.clone()));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Gradient per parameter; absent gradients come back as zeros.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect()
    }

    /// Plain-data copy of all parameters, in registration order.
    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| SnapshotEntry { name: n.clone(), shape: t.shape(), data: t.data() })
                .collect(),
        }
    }

    /// Write snapshot values back into the live tensors. Names and shapes
    /// must match the registry exactly.
    pub fn restore(&self, snap: &ParamSnapshot) -> Result<()> {
        if snap.entries.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, snapshot has {}",
                self.entries.len(),
                snap.entries.len()
            )));
        }
        for ((name, t), e) in self.entries.iter().zip(&snap.entries) {
            if *name != e.name {
                return Err(Error::Checkpoint(format!(
                    "parameter order mismatch: expected {name}, snapshot has {}",
                    e.name
                )));
            }
            if t.shape() != e.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, snapshot has {:?}",
                    t.shape(),
                    e.shape
                )));
            }
            t.set_data(e.data.clone())?;
        }
        Ok(())
    }
}

/// Detached copy of a parameter set: plain data, safe to clone across
/// threads and perturb.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub entries: Vec<SnapshotEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamSnapshot {
    pub fn get(&self, name: &str) -> Option<&SnapshotEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}
