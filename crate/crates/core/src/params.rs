//! Learnable parameters and batch-normalization running statistics.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

/// Whether batch normalization uses batch statistics (and updates the running
/// averages) or the frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter {
            id: id.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Running statistics of one batch-normalization layer. The affine terms live
/// in the parameter map as `{layer}.gamma` and `{layer}.beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub epsilon: f32,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    /// Exponential moving average with the unbiased batch variance.
    pub fn update(&mut self, batch_mean: &[f32], batch_var: &[f32], count: usize) {
        let m = self.momentum;
        let correction = if count > 1 {
            count as f32 / (count - 1) as f32
        } else {
            1.0
        };
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = (m * *r + (1.0 - m) * b * correction).max(0.0);
        }
    }
}

/// Batch statistics observed during a training-mode forward pass, to be
/// folded into the running averages once the step is accepted.
#[derive(Clone, Debug)]
pub struct BatchNormUpdate {
    pub layer: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub count: usize,
}

/// All learnable tensors of a network plus its normalization statistics,
/// keyed by layer-scoped ids. Iteration order is the sorted id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    params: BTreeMap<String, Parameter>,
    norms: BTreeMap<String, BatchNormState>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, value: Tensor) -> Result<()> {
        let id = id.into();
        if self.params.contains_key(&id) {
            return Err(Error::Contract(format!("duplicate parameter id `{id}`")));
        }
        self.params.insert(id.clone(), Parameter::new(id, value));
        Ok(())
    }

    /// Registers `{layer}.gamma = 1`, `{layer}.beta = 0` and fresh running statistics.
    pub fn insert_batch_norm(&mut self, layer: &str, channels: usize) -> Result<()> {
        self.insert(format!("{layer}.gamma"), Tensor::ones([channels]))?;
        self.insert(format!("{layer}.beta"), Tensor::zeros([channels]))?;
        self.norms
            .insert(layer.to_string(), BatchNormState::new(channels));
        Ok(())
    }

    pub fn insert_norm_state(&mut self, layer: impl Into<String>, state: BatchNormState) {
        self.norms.insert(layer.into(), state);
    }

    pub fn get(&self, id: &str) -> Result<&Parameter> {
        self.params
            .get(id)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{id}`")))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(id)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{id}`")))
    }

    pub fn value(&self, id: &str) -> Result<&Tensor> {
        Ok(&self.get(id)?.value)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.params.contains_key(id)
    }

    pub fn norm(&self, layer: &str) -> Result<&BatchNormState> {
        self.norms
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("unknown batch-norm layer `{layer}`")))
    }

    pub fn norm_mut(&mut self, layer: &str) -> Result<&mut BatchNormState> {
        self.norms
            .get_mut(layer)
            .ok_or_else(|| Error::Contract(format!("unknown batch-norm layer `{layer}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn norms(&self) -> impl Iterator<Item = (&String, &BatchNormState)> {
        self.norms.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Parameter::zero_grad);
    }

    /// Convolution kernels (ids ending in `.w`): the set penalized by weight decay.
    pub fn conv_weight_ids(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| k.ends_with(".w"))
            .cloned()
            .collect()
    }

    pub fn apply_norm_updates(&mut self, updates: &[BatchNormUpdate]) -> Result<()> {
        for u in updates {
            self.norm_mut(&u.layer)?.update(&u.mean, &u.var, u.count);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.all_finite())
            && self.norms.values().all(|n| {
                n.running_mean.iter().chain(&n.running_var).all(|v| v.is_finite())
            })
    }
}
