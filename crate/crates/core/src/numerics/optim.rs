//! AdamW with decoupled weight decay, and the cosine-annealing learning-rate
//! schedule with warm restarts used by both training stages.

use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-3, beta1: 0.9, beta2: 0.999, weight_decay: 5e-4, eps: 1e-8 }
    }
}

/// Moment accumulators for every parameter tensor, in parameter order.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One update at learning rate `lr` (the schedule's value for this step).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<(), NumericsError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NumericsError::shape(
                "adamw_step",
                format!("{} params, {} grads, {} states", params.len(), grads.len(), self.first.len()),
            ));
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, weight_decay, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(NumericsError::shape(
                    "adamw_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *w -= lr * weight_decay * *w;
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts: cycle `i` lasts `period * mult^i`
/// epochs and anneals from `base_lr` to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmRestarts {
    pub base_lr: f64,
    pub min_lr: f64,
    pub period: f64,
    pub mult: f64,
}

impl CosineWarmRestarts {
    pub fn new(base_lr: f64, period: f64) -> Self {
        Self { base_lr, min_lr: 0.0, period, mult: 2.0 }
    }

    /// Learning rate at fractional epoch `epoch`.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let mut start = 0.0;
        let mut len = self.period.max(f64::MIN_POSITIVE);
        while epoch >= start + len {
            start += len;
            len *= self.mult.max(1.0);
        }
        let frac = (epoch - start) / len;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
