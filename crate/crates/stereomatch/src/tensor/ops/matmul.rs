//! Matrix multiplication. One i-k-j kernel underlies the forward pass and
//! both adjoints; the j-inner loop is what the compiler vectorizes.

use crate::audit::flops;
use crate::error::{Error, Result};
use crate::tensor::autograd::from_op;
use crate::tensor::{Scalar, Tensor};

/// `c[m,n] += sum_k a[m,k] * b[k,n]` over contiguous row-major slices.
pub(crate) fn gemm_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    flops::add((m * k * n) as u64);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * *bv;
            }
        }
    }
}

/// `c[m,n] += sum_k a[k,m] * b[k,n]` (left operand transposed in place).
pub(crate) fn gemm_at_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    flops::add((m * k * n) as u64);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * *bv;
            }
        }
    }
}

/// `c[m,n] += sum_k a[m,k] * b[n,k]` (right operand transposed in place).
pub(crate) fn gemm_bt_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    flops::add((m * k * n) as u64);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += *av * *bv;
            }
            *cv += acc;
        }
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn plan<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<MatmulDims> {
    let (asym, bsym) = (a.shape(), b.shape());
    match (asym, bsym) {
        ([m, k], [k2, n]) => {
            if k != k2 {
                return Err(Error::shape("matmul", asym, bsym));
            }
            Ok(MatmulDims {
                batch: 1,
                m: *m,
                k: *k,
                n: *n,
                a_batched: false,
                b_batched: false,
                out_shape: vec![*m, *n],
            })
        }
        ([ba, m, k], [bb, k2, n]) => {
            if k != k2 || ba != bb {
                return Err(Error::shape("matmul", asym, bsym));
            }
            Ok(MatmulDims {
                batch: *ba,
                m: *m,
                k: *k,
                n: *n,
                a_batched: true,
                b_batched: true,
                out_shape: vec![*ba, *m, *n],
            })
        }
        ([ba, m, k], [k2, n]) => {
            if k != k2 {
                return Err(Error::shape("matmul", asym, bsym));
            }
            Ok(MatmulDims {
                batch: *ba,
                m: *m,
                k: *k,
                n: *n,
                a_batched: true,
                b_batched: false,
                out_shape: vec![*ba, *m, *n],
            })
        }
        ([m, k], [bb, k2, n]) => {
            if k != k2 {
                return Err(Error::shape("matmul", asym, bsym));
            }
            Ok(MatmulDims {
                batch: *bb,
                m: *m,
                k: *k,
                n: *n,
                a_batched: false,
                b_batched: true,
                out_shape: vec![*bb, *m, *n],
            })
        }
        _ => Err(Error::shape("matmul", asym, bsym)),
    }
}

/// Contracted product of 2-d matrices or stacks of them. A 2-d operand
/// paired with a 3-d one is broadcast across the batch dimension.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = plan(a, b)?;
    let (m, k, n) = (d.m, d.k, d.n);
    let mut out = vec![T::zero(); d.batch * m * n];
    for bi in 0..d.batch {
        let ao = if d.a_batched { bi * m * k } else { 0 };
        let bo = if d.b_batched { bi * k * n } else { 0 };
        gemm_acc(
            &a.data()[ao..ao + m * k],
            &b.data()[bo..bo + k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let out_shape = d.out_shape.clone();
    let dims = d;
    Ok(from_op(out, out_shape, &[a, b], move |args| {
        let (batch, m, k, n) = (dims.batch, dims.m, dims.k, dims.n);
        let da = args.needs(0).then(|| {
            // dA = dC @ B^T, summed over the batch when A was broadcast.
            let mut da = vec![T::zero(); if dims.a_batched { batch * m * k } else { m * k }];
            let bdat = args.parents[1].data();
            for bi in 0..batch {
                let go = bi * m * n;
                let bo = if dims.b_batched { bi * k * n } else { 0 };
                let ao = if dims.a_batched { bi * m * k } else { 0 };
                gemm_bt_acc(
                    &args.adjoint[go..go + m * n],
                    &bdat[bo..bo + k * n],
                    &mut da[ao..ao + m * k],
                    m,
                    n,
                    k,
                );
            }
            da
        });
        let db = args.needs(1).then(|| {
            // dB = A^T @ dC, summed over the batch when B was broadcast.
            let mut db = vec![T::zero(); if dims.b_batched { batch * k * n } else { k * n }];
            let adat = args.parents[0].data();
            for bi in 0..batch {
                let go = bi * m * n;
                let ao = if dims.a_batched { bi * m * k } else { 0 };
                let bo = if dims.b_batched { bi * k * n } else { 0 };
                gemm_at_acc(
                    &adat[ao..ao + m * k],
                    &args.adjoint[go..go + m * n],
                    &mut db[bo..bo + k * n],
                    k,
                    m,
                    n,
                );
            }
            db
        });
        vec![da, db]
    }))
}
