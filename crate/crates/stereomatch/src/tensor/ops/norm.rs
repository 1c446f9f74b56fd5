//! Normalization: softmax, instance norm, batch norm.

use crate::error::{Error, Result};
use crate::tensor::autograd::from_op;
use crate::tensor::{Scalar, Tensor};

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    if axis >= rank {
        return Err(Error::contract(
            "softmax",
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    let asize = x.shape()[axis];
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut data = vec![T::zero(); x.len()];
    let src = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * asize + a) * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..asize {
                max = max.max(src[at(a)]);
            }
            let mut denom = T::zero();
            for a in 0..asize {
                let e = (src[at(a)] - max).exp();
                data[at(a)] = e;
                denom += e;
            }
            for a in 0..asize {
                data[at(a)] /= denom;
            }
        }
    }
    Ok(from_op(data, x.shape().to_vec(), &[x], move |args| {
        vec![args.needs(0).then(|| {
            let s = args.out_data;
            let mut dx = vec![T::zero(); s.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * asize + a) * inner + i;
                    let mut dot = T::zero();
                    for a in 0..asize {
                        dot += args.adjoint[at(a)] * s[at(a)];
                    }
                    for a in 0..asize {
                        dx[at(a)] = s[at(a)] * (args.adjoint[at(a)] - dot);
                    }
                }
            }
            dx
        })]
    }))
}

fn channel_layout<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [c, h, w] => Ok((1, *c, h * w)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::contract(
            op,
            format!("expected 3-d or 4-d input, got {:?}", x.shape()),
        )),
    }
}

fn check_affine<T: Scalar>(
    op: &'static str,
    channels: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<()> {
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(Error::shape(op, gamma.shape(), beta.shape()));
    }
    Ok(())
}

/// Normalize each channel of each sample over its spatial extent, then
/// apply the per-channel affine transform.
pub fn instance_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (batch, channels, hw) = channel_layout("instance_norm", x)?;
    check_affine("instance_norm", channels, gamma, beta)?;
    if hw == 0 {
        return Err(Error::contract("instance_norm", "empty spatial extent"));
    }
    let src = x.data();
    let inv_n = T::one() / T::from_f64(hw as f64);
    let mut data = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); batch * channels];
    let mut means = vec![T::zero(); batch * channels];
    for g in 0..batch * channels {
        let span = &src[g * hw..(g + 1) * hw];
        let mut mean = T::zero();
        for v in span {
            mean += *v;
        }
        mean *= inv_n;
        let mut var = T::zero();
        for v in span {
            let d = *v - mean;
            var += d * d;
        }
        var *= inv_n;
        let istd = T::one() / (var + eps).sqrt();
        means[g] = mean;
        inv_std[g] = istd;
        let ga = gamma.data()[g % channels];
        let be = beta.data()[g % channels];
        for (o, v) in data[g * hw..(g + 1) * hw].iter_mut().zip(span) {
            *o = (*v - mean) * istd * ga + be;
        }
    }
    Ok(from_op(
        data,
        x.shape().to_vec(),
        &[x, gamma, beta],
        move |args| {
            let src = args.parents[0].data();
            let gam = args.parents[1].data();
            let need_x = args.needs(0);
            let need_g = args.needs(1);
            let need_b = args.needs(2);
            let mut dx = need_x.then(|| vec![T::zero(); src.len()]);
            let mut dg = need_g.then(|| vec![T::zero(); channels]);
            let mut db = need_b.then(|| vec![T::zero(); channels]);
            for g in 0..batch * channels {
                let c = g % channels;
                let span = &src[g * hw..(g + 1) * hw];
                let adj = &args.adjoint[g * hw..(g + 1) * hw];
                let mean = means[g];
                let istd = inv_std[g];
                if let Some(db) = db.as_mut() {
                    for a in adj {
                        db[c] += *a;
                    }
                }
                if let Some(dg) = dg.as_mut() {
                    for (a, v) in adj.iter().zip(span) {
                        dg[c] += *a * (*v - mean) * istd;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    // dxhat = g*gamma; dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    let ga = gam[c];
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for (a, v) in adj.iter().zip(span) {
                        let dxh = *a * ga;
                        let xh = (*v - mean) * istd;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    let m_dxh = sum_dxh * inv_n;
                    let m_dxh_xh = sum_dxh_xh * inv_n;
                    for ((o, a), v) in dx[g * hw..(g + 1) * hw].iter_mut().zip(adj).zip(span) {
                        let dxh = *a * ga;
                        let xh = (*v - mean) * istd;
                        *o = istd * (dxh - m_dxh - xh * m_dxh_xh);
                    }
                }
            }
            vec![dx, dg, db]
        },
    ))
}

/// Batch statistics produced by the training-mode forward pass.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    /// Unbiased variance for the running-average update.
    pub var_unbiased: Vec<T>,
}

/// Training-mode batch norm: normalize per channel over batch+spatial dims.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let (batch, channels, hw) = channel_layout("batch_norm", x)?;
    check_affine("batch_norm", channels, gamma, beta)?;
    let group = batch * hw;
    if group == 0 {
        return Err(Error::contract("batch_norm", "empty normalization group"));
    }
    let src = x.data();
    let inv_n = T::one() / T::from_f64(group as f64);
    let per_sample = channels * hw;

    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for n in 0..batch {
        for c in 0..channels {
            let span = &src[n * per_sample + c * hw..n * per_sample + (c + 1) * hw];
            let mut acc = T::zero();
            for v in span {
                acc += *v;
            }
            mean[c] += acc;
        }
    }
    for m in &mut mean {
        *m *= inv_n;
    }
    for n in 0..batch {
        for c in 0..channels {
            let span = &src[n * per_sample + c * hw..n * per_sample + (c + 1) * hw];
            let mut acc = T::zero();
            for v in span {
                let d = *v - mean[c];
                acc += d * d;
            }
            var[c] += acc;
        }
    }
    for v in &mut var {
        *v *= inv_n;
    }
    let var_unbiased: Vec<T> = if group > 1 {
        let f = T::from_f64(group as f64 / (group - 1) as f64);
        var.iter().map(|v| *v * f).collect()
    } else {
        var.clone()
    };

    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut data = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let base = n * per_sample + c * hw;
            let ga = gamma.data()[c];
            let be = beta.data()[c];
            for (o, v) in data[base..base + hw].iter_mut().zip(&src[base..base + hw]) {
                *o = (*v - mean[c]) * inv_std[c] * ga + be;
            }
        }
    }
    let stats = BatchStats {
        mean: mean.clone(),
        var: var.clone(),
        var_unbiased,
    };
    let out = from_op(
        data,
        x.shape().to_vec(),
        &[x, gamma, beta],
        move |args| {
            let src = args.parents[0].data();
            let gam = args.parents[1].data();
            let mut dx = args.needs(0).then(|| vec![T::zero(); src.len()]);
            let mut dg = args.needs(1).then(|| vec![T::zero(); channels]);
            let mut db = args.needs(2).then(|| vec![T::zero(); channels]);
            // Two passes: per-channel adjoint moments, then the dx formula.
            let mut sum_dxh = vec![T::zero(); channels];
            let mut sum_dxh_xh = vec![T::zero(); channels];
            for n in 0..batch {
                for c in 0..channels {
                    let base = n * per_sample + c * hw;
                    let ga = gam[c];
                    for (a, v) in args.adjoint[base..base + hw].iter().zip(&src[base..base + hw]) {
                        let dxh = *a * ga;
                        let xh = (*v - mean[c]) * inv_std[c];
                        sum_dxh[c] += dxh;
                        sum_dxh_xh[c] += dxh * xh;
                        if let Some(db) = db.as_mut() {
                            db[c] += *a;
                        }
                        if let Some(dg) = dg.as_mut() {
                            dg[c] += *a * xh;
                        }
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                for n in 0..batch {
                    for c in 0..channels {
                        let base = n * per_sample + c * hw;
                        let ga = gam[c];
                        let m_dxh = sum_dxh[c] * inv_n;
                        let m_dxh_xh = sum_dxh_xh[c] * inv_n;
                        for ((o, a), v) in dx[base..base + hw]
                            .iter_mut()
                            .zip(&args.adjoint[base..base + hw])
                            .zip(&src[base..base + hw])
                        {
                            let dxh = *a * ga;
                            let xh = (*v - mean[c]) * inv_std[c];
                            *o = inv_std[c] * (dxh - m_dxh - xh * m_dxh_xh);
                        }
                    }
                }
            }
            vec![dx, dg, db]
        },
    );
    Ok((out, stats))
}

/// Evaluation-mode batch norm using stored running statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let (batch, channels, hw) = channel_layout("batch_norm", x)?;
    check_affine("batch_norm", channels, gamma, beta)?;
    if running_mean.len() != channels || running_var.len() != channels {
        return Err(Error::contract(
            "batch_norm",
            "running statistics length mismatch",
        ));
    }
    let per_sample = channels * hw;
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|v| T::one() / (*v + eps).sqrt())
        .collect();
    let rm = running_mean.to_vec();
    let src = x.data();
    let mut data = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let base = n * per_sample + c * hw;
            let ga = gamma.data()[c];
            let be = beta.data()[c];
            for (o, v) in data[base..base + hw].iter_mut().zip(&src[base..base + hw]) {
                *o = (*v - rm[c]) * inv_std[c] * ga + be;
            }
        }
    }
    Ok(from_op(
        data,
        x.shape().to_vec(),
        &[x, gamma, beta],
        move |args| {
            let src = args.parents[0].data();
            let gam = args.parents[1].data();
            let mut dx = args.needs(0).then(|| vec![T::zero(); src.len()]);
            let mut dg = args.needs(1).then(|| vec![T::zero(); channels]);
            let mut db = args.needs(2).then(|| vec![T::zero(); channels]);
            for n in 0..batch {
                for c in 0..channels {
                    let base = n * per_sample + c * hw;
                    for (i, a) in args.adjoint[base..base + hw].iter().enumerate() {
                        let xh = (src[base + i] - rm[c]) * inv_std[c];
                        if let Some(dx) = dx.as_mut() {
                            dx[base + i] = *a * gam[c] * inv_std[c];
                        }
                        if let Some(dg) = dg.as_mut() {
                            dg[c] += *a * xh;
                        }
                        if let Some(db) = db.as_mut() {
                            db[c] += *a;
                        }
                    }
                }
            }
            vec![dx, dg, db]
        },
    ))
}
