//! Decoupled-weight-decay adaptive-moment optimizer and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sc, Param, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
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
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Optimizer state: first/second moment accumulators per parameter plus
/// the step counter. Weight decay is applied decoupled from the adaptive
/// update, and only to parameters with more than one axis (convolution
/// kernels), never to biases or norm affines.
pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &[Param<T>], cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step_count: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Restore accumulator state (checkpoint resume).
    pub fn load_state(&mut self, step_count: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::contract(
                "adamw",
                "optimizer state does not match parameter count",
            ));
        }
        for (slot, new) in self.m.iter().zip(&m) {
            if slot.len() != new.len() {
                return Err(Error::contract("adamw", "moment shape mismatch"));
            }
        }
        self.step_count = step_count;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Apply one update using the gradients stored on `params`.
    pub fn step(&mut self, params: &[Param<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract(
                "adamw",
                format!("expected {} params, got {}", self.m.len(), params.len()),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = sc::<T>(self.cfg.beta1);
        let b2 = sc::<T>(self.cfg.beta2);
        let one = T::one();
        let bias1 = sc::<T>(1.0 / (1.0 - self.cfg.beta1.powf(t)));
        let bias2 = sc::<T>(1.0 / (1.0 - self.cfg.beta2.powf(t)));
        let eps = sc::<T>(self.cfg.eps);
        let lr_t = sc::<T>(lr);
        for (i, p) in params.iter().enumerate() {
            let value = p.get();
            let Some(grad) = value.grad() else { continue };
            let decay = if value.shape().len() > 1 {
                sc::<T>(lr * self.cfg.weight_decay)
            } else {
                T::zero()
            };
            let mut data = value.data().to_vec();
            for (j, g) in grad.iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let m_hat = *m * bias1;
                let v_hat = *v * bias2;
                data[j] = data[j] - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * data[j];
            }
            p.set(Tensor::from_vec(data, &value.shape())?);
        }
        Ok(())
    }
}

/// Clear gradients on every parameter.
pub fn zero_grad<T: Scalar>(params: &[Param<T>]) {
    for p in params {
        p.zero_grad();
    }
}

/// Rescale gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(params: &[Param<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = p.get().grad() {
            for v in g {
                sq += v.as_f64() * v.as_f64();
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = sc::<T>(max_norm / norm);
        for p in params {
            p.get().scale_grad(factor);
        }
    }
    norm
}
