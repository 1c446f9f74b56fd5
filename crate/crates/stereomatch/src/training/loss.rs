//! Sequence supervision: exponentially weighted L1 over all predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, sc, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    /// Exponential weight base; prediction `i` of `N` is weighted
    /// `gamma^(N-i)`, so later predictions count more.
    pub gamma: f64,
    /// Refinement iterations during training.
    pub train_iters: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.9,
            train_iters: 16,
        }
    }
}

/// The per-prediction weights `gamma^(N-i)` for `i = 1..=N`.
pub fn sequence_weights(n: usize, gamma: f64) -> Vec<f64> {
    (1..=n).map(|i| gamma.powi((n - i) as i32)).collect()
}

/// Masked mean-L1 distance to ground truth, accumulated over the whole
/// prediction sequence with weights `gamma^(N-i)`.
pub fn sequence_loss<T: Scalar>(
    predictions: &[Tensor<T>],
    gt: &Tensor<T>,
    mask: &Tensor<T>,
    gamma: f64,
) -> Result<Tensor<T>> {
    if predictions.is_empty() {
        return Err(Error::contract("sequence_loss", "no predictions"));
    }
    if !(0.0..=1.0).contains(&gamma) || gamma == 0.0 {
        return Err(Error::contract(
            "sequence_loss",
            format!("gamma must be in (0, 1], got {gamma}"),
        ));
    }
    if mask.shape() != gt.shape() {
        return Err(Error::shape("sequence_loss", mask.shape(), gt.shape()));
    }
    let count: f64 = mask.iter().map(|v| v.as_f64()).sum();
    if count <= 0.0 {
        return Err(Error::contract("sequence_loss", "mask selects no pixels"));
    }
    let weights = sequence_weights(predictions.len(), gamma);
    let inv_count = sc::<T>(1.0 / count);
    let mut total: Option<Tensor<T>> = None;
    for (pred, w) in predictions.iter().zip(weights) {
        if pred.shape() != gt.shape() {
            return Err(Error::shape("sequence_loss", pred.shape(), gt.shape()));
        }
        let l1 = ops::mul(&ops::abs(&ops::sub(gt, pred)?), mask)?;
        let term = ops::scale(&ops::scale(&ops::sum(&l1), inv_count), sc::<T>(w));
        total = Some(match total {
            Some(t) => ops::add(&t, &term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty predictions"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_prediction_is_plain_masked_mean() {
        let gt = Tensor::from_vec(vec![1.0f32, 2.0, 3.0, 4.0], &[1, 2, 2]).unwrap();
        let pred = Tensor::from_vec(vec![2.0f32, 2.0, 5.0, 0.0], &[1, 2, 2]).unwrap();
        let mask = Tensor::from_vec(vec![1.0f32, 1.0, 1.0, 0.0], &[1, 2, 2]).unwrap();
        let loss = sequence_loss(&[pred], &gt, &mask, 0.9).unwrap();
        // (|1-2| + |2-2| + |3-5|) / 3 = 1.0
        assert!((loss.item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn three_unit_errors_weighted_by_gamma() {
        let gt = Tensor::full(&[1, 2, 2], 1.0f32);
        let pred = Tensor::full(&[1, 2, 2], 2.0f32);
        let mask = Tensor::full(&[1, 2, 2], 1.0f32);
        let preds = vec![pred.clone(), pred.clone(), pred];
        let loss = sequence_loss(&preds, &gt, &mask, 0.9).unwrap();
        // 0.81 + 0.9 + 1.0
        assert!((loss.item() - 2.71).abs() < 1e-5, "{}", loss.item());
    }

    #[test]
    fn weight_ratio_is_inverse_gamma() {
        let w = sequence_weights(5, 0.9);
        for i in 0..4 {
            assert!((w[i + 1] / w[i] - 1.0 / 0.9).abs() < 1e-12);
        }
        assert!(w.iter().all(|v| *v > 0.0));
        assert!(w.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn empty_mask_is_contract_error() {
        let gt = Tensor::full(&[1, 2, 2], 1.0f32);
        let pred = Tensor::full(&[1, 2, 2], 2.0f32);
        let mask = Tensor::zeros(&[1, 2, 2]);
        assert!(sequence_loss(&[pred], &gt, &mask, 0.9).is_err());
    }

    #[test]
    fn loss_is_differentiable() {
        use crate::tensor::autograd::backward;
        let gt = Tensor::from_vec(vec![1.0f64, -2.0], &[1, 1, 2]).unwrap();
        let pred = Tensor::from_vec(vec![0.5f64, 0.5], &[1, 1, 2])
            .unwrap()
            .requires_grad();
        let mask = Tensor::full(&[1, 1, 2], 1.0f64);
        let loss = sequence_loss(&[pred.clone()], &gt, &mask, 0.9).unwrap();
        backward(&loss).unwrap();
        // d/dpred mean|gt - pred| = -sign(gt - pred) / count
        assert_eq!(pred.grad().unwrap(), vec![-0.5, 0.5]);
    }
}
