//! Single-cycle learning-rate schedule: linear warmup to the peak, then a
//! linear anneal down to the floor. The rate never drops below the floor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OneCycleConfig {
    pub peak_lr: f64,
    /// Warmup starts at `peak_lr / div_factor`.
    pub div_factor: f64,
    /// Floor for the whole schedule (and the anneal target).
    pub min_lr: f64,
    /// Fraction of the run spent warming up.
    pub warmup_frac: f64,
}

impl Default for OneCycleConfig {
    fn default() -> Self {
        OneCycleConfig {
            peak_lr: 2e-4,
            div_factor: 2.0,
            min_lr: 1e-4,
            warmup_frac: 0.05,
        }
    }
}

/// Learning rate at `step` of a `total_steps` run.
pub fn one_cycle_lr(step: usize, total_steps: usize, cfg: &OneCycleConfig) -> Result<f64> {
    if total_steps == 0 || step >= total_steps {
        return Err(Error::contract(
            "one_cycle_lr",
            format!("step {step} out of range for {total_steps} steps"),
        ));
    }
    let start = cfg.peak_lr / cfg.div_factor;
    if total_steps == 1 {
        return Ok(cfg.peak_lr.max(cfg.min_lr));
    }
    let warm = ((total_steps as f64 * cfg.warmup_frac).round() as usize)
        .clamp(1, total_steps - 1);
    let lr = if step <= warm {
        start + (cfg.peak_lr - start) * step as f64 / warm as f64
    } else {
        let t = (step - warm) as f64 / (total_steps - 1 - warm) as f64;
        cfg.peak_lr + (cfg.min_lr - cfg.peak_lr) * t
    };
    Ok(lr.max(cfg.min_lr))
}
