//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Scalar;

/// Reference learning rate per 4 samples of batch.
pub const REFERENCE_LR: f64 = 1.5e-4;

/// Learning rate scaled linearly with batch size: `1.5e-4 * batch / 4`.
pub fn scaled_base_lr(batch_size: usize) -> f64 {
    REFERENCE_LR * batch_size as f64 / 4.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moments and step counter for one parameter store.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    store: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let m: Vec<Vec<T>> = store
            .iter()
            .map(|p| vec![T::zero(); p.tensor.numel()])
            .collect();
        let v = m.clone();
        AdamW {
            config,
            store: store.key(),
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter. Frozen parameters are left
    /// untouched and keep their moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::invalid("adamw", format!("learning rate {lr} must be finite and >= 0")));
        }
        if grads.store != self.store || store.key() != self.store {
            return Err(Error::invalid("adamw", "gradients belong to a different parameter store"));
        }
        if let Some(p) = store.iter().nth(grads.len()) {
            return Err(Error::MissingGradient {
                name: p.name.clone(),
            });
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let decay = T::of(1.0 - lr * c.weight_decay);

        for (i, p) in store.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let g = grads.by_index(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let denom = (*vi * inv_bc2).sqrt() + eps;
                *w = *w * decay - step_size * *mi / denom;
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at
/// `total_steps`. `step` is clamped into `[0, total_steps]`.
pub fn cosine_warmup_lr(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total.saturating_sub(warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
