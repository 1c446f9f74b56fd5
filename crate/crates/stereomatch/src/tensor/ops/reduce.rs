//! Full reductions.

use crate::tensor::autograd::from_op;
use crate::tensor::{sc, Scalar, Tensor};

/// Sum of all elements, as a scalar tensor.
pub fn sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for v in a.data() {
        acc += *v;
    }
    from_op(vec![acc], vec![1], &[a], |args| {
        vec![args
            .needs(0)
            .then(|| vec![args.adjoint[0]; args.parents[0].len()])]
    })
}

/// Mean of all elements, as a scalar tensor.
pub fn mean<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let n = a.len().max(1);
    let inv = sc::<T>(1.0 / n as f64);
    let mut acc = T::zero();
    for v in a.data() {
        acc += *v;
    }
    from_op(vec![acc * inv], vec![1], &[a], move |args| {
        vec![args
            .needs(0)
            .then(|| vec![args.adjoint[0] * inv; args.parents[0].len()])]
    })
}
