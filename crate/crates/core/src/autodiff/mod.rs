//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive in execution order; [`Tape::backward`]
//! walks it once in reverse. Parameters live in a [`ParamStore`] and are
//! copied onto the tape per step, so a store can be shared read-only while
//! several tapes are alive.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod tape;
mod tensor;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use adam::{Adam, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{bce_with_logits, Conv2dSpec, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{numel, Tensor};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// He-normal initialized weights with the given fan-in.
    pub fn add_he<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        self.add_normal(name, shape, std, rng)
    }

    pub fn add_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..numel(shape)).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn add_full(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from `(name, tensor)` pairs. Every parameter must
    /// be present with a matching shape.
    pub fn load_from(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (i, name) in self.names.iter().enumerate() {
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| AutodiffError::Checkpoint(format!("missing parameter `{name}`")))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(AutodiffError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = (*src).clone();
        }
        Ok(())
    }
}
