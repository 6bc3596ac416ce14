//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! replays the record in reverse. Node indices double as the topological order,
//! which keeps gradient accumulation order (and therefore every bit of the
//! result) fixed from run to run.

mod graph;
mod optim;
mod scalar;
mod tensor;

use std::collections::BTreeMap;

pub use graph::{Graph, Node, Var};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>, GradError> {
        self.get(name).ok_or_else(|| GradError::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every tensor whose name starts with `prefix` into `other`.
    pub fn extend_prefix(&mut self, other: &ParamStore<T>, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.insert(k.clone(), v.clone());
        }
    }

    /// Names whose tensors differ bitwise (or exist on only one side).
    pub fn diff(&self, other: &ParamStore<T>) -> Vec<String> {
        let mut out: Vec<String> = self
            .iter()
            .filter(|(k, v)| other.get(k).is_none_or(|o| !o.bit_eq(v)))
            .map(|(k, _)| k.clone())
            .collect();
        out.extend(other.names().filter(|k| !self.contains(k)).cloned());
        out.sort();
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}
