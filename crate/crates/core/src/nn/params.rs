use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{NnError, Result};
use crate::tensor::Tensor;

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    keys: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let key = key.into();
        if self.index.contains_key(&key) {
            return Err(NnError::Checkpoint(format!("duplicate tensor key {key}")));
        }
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn get(&self, key: &str) -> Option<&Tensor<f32>> {
        self.index_of(key).map(|i| &self.tensors[i])
    }

    pub fn key(&self, i: usize) -> &str {
        &self.keys[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<f32> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f32> {
        &mut self.tensors[i]
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.keys.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with std `1/sqrt(fan_in)`.
    Gaussian { fan_in: usize },
    Constant(f32),
}

/// One tensor an architecture declares.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub key: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamInfo {
    pub(crate) fn new(key: String, shape: Vec<usize>, init: Init) -> Self {
        ParamInfo { key, shape, init }
    }

    /// Draws the initial value; constants consume no randomness.
    pub fn materialize(&self, rng: &mut impl Rng) -> Tensor<f32> {
        match self.init {
            Init::Constant(c) => Tensor::full(&self.shape, c),
            Init::Gaussian { fan_in } => {
                let normal = Normal::new(0.0f32, 1.0 / (fan_in as f32).sqrt()).expect("positive std");
                Tensor::from_fn(&self.shape, |_| normal.sample(rng))
            }
        }
    }
}
