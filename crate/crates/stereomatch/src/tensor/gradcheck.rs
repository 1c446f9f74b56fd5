//! Finite-difference verification of autograd gradients.
//!
//! Runs in `f64`: the forward map is rebuilt around perturbed leaves and the
//! central difference `(f(x+h) - f(x-h)) / 2h` is compared coordinate by
//! coordinate against the recorded adjoints.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::autograd::backward;
use super::ops;
use super::Tensor;
use crate::error::Result;

/// Tolerances and sampling policy for a finite-difference comparison.
#[derive(Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Cap on checked coordinates per input; `None` checks all of them.
    pub max_coords_per_input: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            rel_tol: 1e-3,
            abs_tol: 1e-7,
            max_coords_per_input: None,
        }
    }
}

/// One coordinate where autograd and finite differences disagree.
#[derive(Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub coord: usize,
    pub autograd: f64,
    pub finite_diff: f64,
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

impl GradCheck {
    /// Compare autograd gradients of `build` (a map from leaves to a scalar
    /// loss) against central finite differences at `inputs`.
    pub fn check<F>(
        &self,
        rng: &mut ChaCha8Rng,
        inputs: &[(Vec<f64>, Vec<usize>)],
        build: F,
    ) -> Result<GradReport>
    where
        F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        let leaves: Vec<Tensor<f64>> = inputs
            .iter()
            .map(|(d, s)| Tensor::from_vec(d.clone(), s).map(|t| t.requires_grad()))
            .collect::<Result<_>>()?;
        let loss = build(&leaves)?;
        backward(&loss)?;
        let grads: Vec<Vec<f64>> = leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
            .collect();

        let eval = |data: &[(Vec<f64>, Vec<usize>)]| -> Result<f64> {
            let leaves: Vec<Tensor<f64>> = data
                .iter()
                .map(|(d, s)| Tensor::from_vec(d.clone(), s))
                .collect::<Result<_>>()?;
            Ok(super::no_grad(|| build(&leaves))?.item())
        };

        let mut report = GradReport::default();
        for (i, (data, _)) in inputs.iter().enumerate() {
            let coords: Vec<usize> = match self.max_coords_per_input {
                Some(k) if data.len() > k => {
                    (0..k).map(|_| rng.gen_range(0..data.len())).collect()
                }
                _ => (0..data.len()).collect(),
            };
            for c in coords {
                let mut plus = inputs.to_vec();
                plus[i].0[c] += self.eps;
                let mut minus = inputs.to_vec();
                minus[i].0[c] -= self.eps;
                let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * self.eps);
                let ag = grads[i][c];
                let denom = ag.abs().max(fd.abs());
                let err = (ag - fd).abs();
                let rel = if denom > 0.0 { err / denom } else { 0.0 };
                report.checked += 1;
                if denom > 0.0 {
                    report.max_rel_err = report.max_rel_err.max(rel);
                }
                if err > self.rel_tol * denom + self.abs_tol {
                    report.failures.push(GradMismatch {
                        input: i,
                        coord: c,
                        autograd: ag,
                        finite_diff: fd,
                    });
                }
            }
        }
        Ok(report)
    }
}

/// Finite-difference check of parameter gradients for an arbitrary model:
/// `loss_fn` rebuilds the scalar loss from the current parameter values.
/// Samples up to `coords_per_param` coordinates of every trainable
/// parameter.
pub fn check_params_fd(
    rng: &mut ChaCha8Rng,
    params: &[crate::tensor::Param<f64>],
    coords_per_param: usize,
    cfg: &GradCheck,
    loss_fn: impl Fn() -> Result<Tensor<f64>>,
) -> Result<GradReport> {
    for p in params {
        p.zero_grad();
    }
    let loss = loss_fn()?;
    super::autograd::backward(&loss)?;
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    for p in params {
        p.zero_grad();
    }

    let mut report = GradReport::default();
    for (i, p) in params.iter().enumerate() {
        let value = p.get();
        let base = value.data().to_vec();
        let shape = value.shape().to_vec();
        let n = base.len();
        let coords: Vec<usize> = if n > coords_per_param {
            (0..coords_per_param).map(|_| rng.gen_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        for c in coords {
            let mut plus = base.clone();
            plus[c] += cfg.eps;
            p.set(Tensor::from_vec(plus, &shape)?);
            let lp = super::no_grad(&loss_fn)?.item();
            let mut minus = base.clone();
            minus[c] -= cfg.eps;
            p.set(Tensor::from_vec(minus, &shape)?);
            let lm = super::no_grad(&loss_fn)?.item();
            p.set(Tensor::from_vec(base.clone(), &shape)?);
            let fd = (lp - lm) / (2.0 * cfg.eps);
            let ag = grads[i][c];
            let denom = ag.abs().max(fd.abs());
            let err = (ag - fd).abs();
            report.checked += 1;
            if denom > 0.0 {
                report.max_rel_err = report.max_rel_err.max(err / denom);
            }
            if err > cfg.rel_tol * denom + cfg.abs_tol {
                report.failures.push(GradMismatch {
                    input: i,
                    coord: c,
                    autograd: ag,
                    finite_diff: fd,
                });
            }
        }
    }
    Ok(report)
}

fn rand_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Keep values away from activation kinks (|x| = 0) so the central
    // difference never straddles a non-smooth point.
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// A named finite-difference check over one differentiable operation.
pub struct OpCheck {
    pub name: &'static str,
    #[allow(clippy::type_complexity)]
    run: Box<dyn Fn(&mut ChaCha8Rng) -> Result<GradReport>>,
}

impl OpCheck {
    pub fn run(&self, rng: &mut ChaCha8Rng) -> Result<GradReport> {
        (self.run)(rng)
    }
}

/// Finite-difference checks covering every differentiable primitive.
pub fn builtin_op_checks() -> Vec<OpCheck> {
    let cfg = GradCheck::default();
    fn inputs(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> Vec<(Vec<f64>, Vec<usize>)> {
        shapes
            .iter()
            .map(|s| (rand_data(rng, s.iter().product()), s.to_vec()))
            .collect()
    }
    macro_rules! check {
        ($name:literal, $shapes:expr, $build:expr) => {
            OpCheck {
                name: $name,
                run: Box::new(move |rng| {
                    let ins = inputs(rng, $shapes);
                    cfg.check(rng, &ins, $build)
                }),
            }
        };
    }

    vec![
        check!("add", &[&[3, 4], &[3, 4]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::add(&t[0], &t[1])?)))
        }),
        check!("sub", &[&[3, 4], &[3, 4]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::sub(&t[0], &t[1])?)))
        }),
        check!("mul", &[&[3, 4], &[3, 4]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::mul(&t[0], &t[1])?)))
        }),
        check!("neg_scale_addscalar", &[&[2, 5]], |t| {
            let y = ops::add_scalar(&ops::scale(&ops::neg(&t[0]), 1.7), 0.3);
            Ok(ops::sum(&ops::tanh(&y)))
        }),
        check!("abs", &[&[2, 6]], |t| Ok(ops::sum(&ops::abs(&t[0])))),
        check!("relu", &[&[3, 5]], |t| {
            Ok(ops::sum(&ops::mul(&ops::relu(&t[0]), &ops::relu(&t[0]))?))
        }),
        check!("sigmoid", &[&[2, 7]], |t| Ok(ops::sum(&ops::sigmoid(&t[0])))),
        check!("tanh", &[&[2, 7]], |t| {
            Ok(ops::sum(&ops::mul(&ops::tanh(&t[0]), &ops::tanh(&t[0]))?))
        }),
        check!("matmul", &[&[3, 4], &[4, 2]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::matmul(&t[0], &t[1])?)))
        }),
        check!("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::matmul(&t[0], &t[1])?)))
        }),
        check!("matmul_broadcast_rhs", &[&[2, 3, 4], &[4, 2]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::matmul(&t[0], &t[1])?)))
        }),
        check!("conv2d", &[&[2, 4, 5], &[3, 2, 3, 3]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::conv2d(&t[0], &t[1], 1, 1)?)))
        }),
        check!("conv2d_strided", &[&[1, 2, 6, 6], &[2, 2, 3, 3]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::conv2d(&t[0], &t[1], 2, 1)?)))
        }),
        check!("add_channel_bias", &[&[2, 3, 2, 2], &[3]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::add_channel_bias(&t[0], &t[1])?)))
        }),
        check!("softmax", &[&[3, 4]], |t| {
            let s = ops::softmax(&t[0], 1)?;
            Ok(ops::sum(&ops::mul(&s, &s)?))
        }),
        check!("instance_norm", &[&[2, 2, 3, 4], &[2], &[2]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::instance_norm(
                &t[0], &t[1], &t[2], 1e-5,
            )?)))
        }),
        check!("batch_norm_train", &[&[3, 2, 2, 3], &[2], &[2]], |t| {
            let (y, _) = ops::batch_norm_train(&t[0], &t[1], &t[2], 1e-5)?;
            Ok(ops::sum(&ops::tanh(&y)))
        }),
        check!("batch_norm_eval", &[&[2, 2, 2, 2], &[2], &[2]], |t| {
            let y = ops::batch_norm_eval(&t[0], &t[1], &t[2], &[0.1, -0.2], &[0.9, 1.1], 1e-5)?;
            Ok(ops::sum(&ops::tanh(&y)))
        }),
        check!("concat_narrow", &[&[2, 3, 2], &[2, 2, 2]], |t| {
            let c = ops::concat(&[&t[0], &t[1]], 1)?;
            let n = ops::narrow(&c, 1, 1, 3)?;
            Ok(ops::sum(&ops::tanh(&n)))
        }),
        check!("reshape", &[&[2, 6]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::reshape(&t[0], &[3, 4])?)))
        }),
        check!("mean", &[&[4, 3]], |t| Ok(ops::mean(&ops::mul(&t[0], &t[0])?))),
        check!("avgpool_lastdim_even", &[&[3, 8]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::avgpool_lastdim(&t[0])?)))
        }),
        check!("avgpool_lastdim_odd", &[&[3, 7]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::avgpool_lastdim(&t[0])?)))
        }),
        check!("upsample2x", &[&[2, 3, 4]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::upsample2x_bilinear(&t[0])?)))
        }),
        check!("downsample2x", &[&[2, 4, 6]], |t| {
            Ok(ops::sum(&ops::tanh(&ops::downsample2x_mean(&t[0])?)))
        }),
        check!("bilinear_sample_1d", &[&[6], &[1]], |t| {
            // Shift the coordinate into the row interior, away from
            // integer-grid kinks.
            let x = ops::add_scalar(&ops::scale(&ops::tanh(&t[1]), 1.4), 2.4);
            ops::bilinear_sample_1d(&t[0], &x)
        }),
    ]
}
