//! Named parameter storage with a frozen/trainable partition.
//!
//! Iteration order is insertion order and is the canonical order for
//! optimizer updates, serialization, and gradient accumulation, so runs
//! are reproducible bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::tensor::Tensor;

/// Gradients keyed by parameter name. `BTreeMap` so that any iteration
/// over the map itself is deterministic too.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Deep-cloneable store of named tensors. `clone()` produces a
/// value-equal store whose buffers are independent of the original.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, ParamEntry)>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamError {
    DuplicateName(String),
    UnknownName(String),
}

impl fmt::Display for ParamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamError::DuplicateName(n) => write!(f, "duplicate parameter name: {n}"),
            ParamError::UnknownName(n) => write!(f, "unknown parameter name: {n}"),
        }
    }
}

impl std::error::Error for ParamError {}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<(), ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::DuplicateName(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries
            .push((name.to_string(), ParamEntry { tensor, trainable }));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry, ParamError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| ParamError::UnknownName(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.get(name).map(|e| &e.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor, ParamError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1.tensor),
            None => Err(ParamError::UnknownName(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    /// Trainable entries in insertion order.
    pub fn trainable_iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, e)| (n.as_str(), &e.tensor))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable_iter().map(|(n, _)| n.to_string()).collect()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.trainable_iter().map(|(_, t)| t.numel()).sum()
    }

    /// Deep value copy; see [`Clone`]. Named to match the cloning step of
    /// the meta-training loop.
    pub fn clone_params(&self) -> ParamStore {
        self.clone()
    }

    /// Value equality over names, flags, shapes, and payload bits.
    pub fn value_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((an, ae), (bn, be))| {
                    an == bn
                        && ae.trainable == be.trainable
                        && ae.tensor.shape() == be.tensor.shape()
                        && ae
                            .tensor
                            .data()
                            .iter()
                            .zip(be.tensor.data().iter())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}
