//! Shape manipulation: concatenation, slicing, reshaping.

use crate::error::{Error, Result};
use crate::tensor::autograd::from_op;
use crate::tensor::{numel, Scalar, Tensor};

/// Concatenate tensors along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::contract("concat", "no inputs"));
    }
    let rank = parts[0].shape().len();
    if axis >= rank {
        return Err(Error::contract(
            "concat",
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    for p in parts {
        if p.shape().len() != rank {
            return Err(Error::shape("concat", parts[0].shape(), p.shape()));
        }
        for (d, (a, b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
            if d != axis && a != b {
                return Err(Error::shape("concat", parts[0].shape(), p.shape()));
            }
        }
    }
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();

    let mut data = vec![T::zero(); numel(&out_shape)];
    let out_step = out_shape[axis] * inner;
    for o in 0..outer {
        let mut offset = 0;
        for p in parts {
            let span = p.shape()[axis] * inner;
            let src = &p.data()[o * span..(o + 1) * span];
            data[o * out_step + offset..o * out_step + offset + span].copy_from_slice(src);
            offset += span;
        }
    }
    let spans: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    Ok(from_op(data, out_shape, parts, move |args| {
        let mut grads: Vec<Option<Vec<T>>> = args
            .parents
            .iter()
            .enumerate()
            .map(|(i, p)| args.needs(i).then(|| vec![T::zero(); p.len()]))
            .collect();
        let out_step: usize = spans.iter().sum();
        for o in 0..outer {
            let mut offset = 0;
            for (i, span) in spans.iter().enumerate() {
                if let Some(g) = grads[i].as_mut() {
                    g[o * span..(o + 1) * span]
                        .copy_from_slice(&args.adjoint[o * out_step + offset..o * out_step + offset + span]);
                }
                offset += span;
            }
        }
        grads
    }))
}

/// Slice `len` entries starting at `start` along `axis`.
pub fn narrow<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    if axis >= rank || start + len > x.shape()[axis] {
        return Err(Error::contract(
            "narrow",
            format!(
                "slice {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                x.shape()
            ),
        ));
    }
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let src_step = x.shape()[axis] * inner;
    let dst_step = len * inner;

    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let mut data = vec![T::zero(); numel(&out_shape)];
    for o in 0..outer {
        let src = &x.data()[o * src_step + start * inner..o * src_step + (start + len) * inner];
        data[o * dst_step..(o + 1) * dst_step].copy_from_slice(src);
    }
    Ok(from_op(data, out_shape, &[x], move |args| {
        vec![args.needs(0).then(|| {
            let mut dx = vec![T::zero(); args.parents[0].len()];
            for o in 0..outer {
                dx[o * src_step + start * inner..o * src_step + (start + len) * inner]
                    .copy_from_slice(&args.adjoint[o * dst_step..(o + 1) * dst_step]);
            }
            dx
        })]
    }))
}

/// Reinterpret the element layout under a new shape of equal volume.
pub fn reshape<T: Scalar>(x: &Tensor<T>, new_shape: &[usize]) -> Result<Tensor<T>> {
    if numel(new_shape) != x.len() {
        return Err(Error::shape("reshape", x.shape(), new_shape));
    }
    Ok(from_op(
        x.data().to_vec(),
        new_shape.to_vec(),
        &[x],
        |args| vec![args.needs(0).then(|| args.adjoint.to_vec())],
    ))
}
