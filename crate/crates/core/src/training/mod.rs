//! Masked-LM pre-training at desk scale: masking, a hand-derived backward
//! pass through the encoder, AdamW, and LoRA adapters.

mod adamw;
mod backward;
pub mod lora;
mod masking;
mod pretrain;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use adamw::{adamw_step, AdamState, AdamWConfig, Parameters};
pub use backward::{mlm_loss, mlm_loss_value};
pub use lora::{attach_lora, merge_lora, LoraAdapter};
pub use masking::{mask_batch, MaskedBatch};
pub use pretrain::{pretrain, EpochStats};

/// Named gradient tensors; adding to an existing name accumulates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, grad: Tensor<T>) {
        match self.tensors.get_mut(name) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.tensors.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors.values_mut() {
            t.scale(factor);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub mask_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            mask_fraction: 0.15,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::Config(format!("mask_fraction must lie in (0, 1), got {}", self.mask_fraction)));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.adamw().validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}
