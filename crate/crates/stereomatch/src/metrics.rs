//! Disparity evaluation metrics: end-point error and bad-pixel ratios.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Thresholds reported by default (the 3 px entry doubles as D1).
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.5, 1.0, 2.0, 3.0, 4.0];

/// Evaluation summary over the valid pixels.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    /// Mean absolute end-point error in pixels.
    pub epe: f64,
    /// `(threshold, percent of valid pixels with error > threshold)`,
    /// sorted by threshold.
    pub bad: Vec<(f64, f64)>,
    /// Percent of valid pixels with error above 3 px.
    pub d1_pct: f64,
    pub valid_pixels: usize,
}

impl MetricsReport {
    pub fn bad_at(&self, threshold: f64) -> Option<f64> {
        self.bad
            .iter()
            .find(|(t, _)| (*t - threshold).abs() < 1e-12)
            .map(|(_, pct)| *pct)
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "epe {:.4} px", self.epe)?;
        for (t, pct) in &self.bad {
            write!(f, " | bad-{t} {pct:.2}%")?;
        }
        write!(f, " | d1 {:.2}% | valid {}", self.d1_pct, self.valid_pixels)
    }
}

/// Compare a predicted disparity field to ground truth over `mask`
/// (every pixel when `mask` is `None`).
pub fn compute_metrics<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    thresholds: &[f64],
) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("compute_metrics", pred.shape(), gt.shape()));
    }
    if let Some(m) = mask {
        if m.shape() != gt.shape() {
            return Err(Error::shape("compute_metrics", m.shape(), gt.shape()));
        }
    }
    let mut thresholds: Vec<f64> = thresholds.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut count = 0usize;
    let mut abs_sum = 0.0f64;
    let mut over = vec![0usize; thresholds.len()];
    let mut over3 = 0usize;
    for i in 0..pred.len() {
        if let Some(m) = mask {
            if m.data()[i].as_f64() <= 0.0 {
                continue;
            }
        }
        let err = (pred.data()[i].as_f64() - gt.data()[i].as_f64()).abs();
        count += 1;
        abs_sum += err;
        for (slot, t) in over.iter_mut().zip(&thresholds) {
            if err > *t {
                *slot += 1;
            }
        }
        if err > 3.0 {
            over3 += 1;
        }
    }
    if count == 0 {
        return Err(Error::contract("compute_metrics", "mask selects no pixels"));
    }
    let pct = |n: usize| 100.0 * n as f64 / count as f64;
    Ok(MetricsReport {
        epe: abs_sum / count as f64,
        bad: thresholds.iter().cloned().zip(over.into_iter().map(pct)).collect(),
        d1_pct: pct(over3),
        valid_pixels: count,
    })
}
