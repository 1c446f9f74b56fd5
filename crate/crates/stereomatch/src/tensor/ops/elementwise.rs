//! Pointwise arithmetic and activations.

use crate::error::{Error, Result};
use crate::tensor::autograd::from_op;
use crate::tensor::{sc, Scalar, Tensor};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    Ok(from_op(data, a.shape().to_vec(), &[a, b], |args| {
        vec![
            args.needs(0).then(|| args.adjoint.to_vec()),
            args.needs(1).then(|| args.adjoint.to_vec()),
        ]
    }))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x - *y).collect();
    Ok(from_op(data, a.shape().to_vec(), &[a, b], |args| {
        vec![
            args.needs(0).then(|| args.adjoint.to_vec()),
            args.needs(1)
                .then(|| args.adjoint.iter().map(|g| -*g).collect()),
        ]
    }))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    Ok(from_op(data, a.shape().to_vec(), &[a, b], |args| {
        let a = &args.parents[0];
        let b = &args.parents[1];
        vec![
            args.needs(0).then(|| {
                args.adjoint
                    .iter()
                    .zip(b.data())
                    .map(|(g, y)| *g * *y)
                    .collect()
            }),
            args.needs(1).then(|| {
                args.adjoint
                    .iter()
                    .zip(a.data())
                    .map(|(g, x)| *g * *x)
                    .collect()
            }),
        ]
    }))
}

pub fn neg<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|x| -*x).collect();
    from_op(data, a.shape().to_vec(), &[a], |args| {
        vec![args
            .needs(0)
            .then(|| args.adjoint.iter().map(|g| -*g).collect())]
    })
}

/// Multiply every element by a constant.
pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data = a.data().iter().map(|x| *x * c).collect();
    from_op(data, a.shape().to_vec(), &[a], move |args| {
        vec![args
            .needs(0)
            .then(|| args.adjoint.iter().map(|g| *g * c).collect())]
    })
}

/// Add a constant to every element.
pub fn add_scalar<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data = a.data().iter().map(|x| *x + c).collect();
    from_op(data, a.shape().to_vec(), &[a], |args| {
        vec![args.needs(0).then(|| args.adjoint.to_vec())]
    })
}

/// |x|, with subgradient 0 at the origin.
pub fn abs<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|x| x.abs()).collect();
    from_op(data, a.shape().to_vec(), &[a], |args| {
        vec![args.needs(0).then(|| {
            args.adjoint
                .iter()
                .zip(args.parents[0].data())
                .map(|(g, x)| {
                    if *x > T::zero() {
                        *g
                    } else if *x < T::zero() {
                        -*g
                    } else {
                        T::zero()
                    }
                })
                .collect()
        })]
    })
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    // (x + |x|) / 2: branchless, and NaN propagates instead of being
    // silently flushed to zero by a comparison.
    let half = sc::<T>(0.5);
    let data = a.data().iter().map(|x| (*x + x.abs()) * half).collect();
    from_op(data, a.shape().to_vec(), &[a], |args| {
        vec![args.needs(0).then(|| {
            args.adjoint
                .iter()
                .zip(args.parents[0].data())
                .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                .collect()
        })]
    })
}

pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let one = T::one();
    let data: Vec<T> = a.data().iter().map(|x| one / (one + (-*x).exp())).collect();
    from_op(data, a.shape().to_vec(), &[a], |args| {
        vec![args.needs(0).then(|| {
            args.adjoint
                .iter()
                .zip(args.out_data)
                .map(|(g, s)| *g * *s * (T::one() - *s))
                .collect()
        })]
    })
}

pub fn tanh<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = a.data().iter().map(|x| x.tanh()).collect();
    from_op(data, a.shape().to_vec(), &[a], |args| {
        vec![args.needs(0).then(|| {
            args.adjoint
                .iter()
                .zip(args.out_data)
                .map(|(g, t)| *g * (T::one() - *t * *t))
                .collect()
        })]
    })
}

/// Add a per-channel bias to a `[C, H, W]` or `[N, C, H, W]` tensor.
pub fn add_channel_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, channels, hw) = match x.shape() {
        [c, h, w] => (1usize, *c, h * w),
        [n, c, h, w] => (*n, *c, h * w),
        _ => {
            return Err(Error::contract(
                "add_channel_bias",
                format!("expected 3-d or 4-d input, got {:?}", x.shape()),
            ))
        }
    };
    if bias.shape() != [channels] {
        return Err(Error::shape("add_channel_bias", x.shape(), bias.shape()));
    }
    let per_sample = channels * hw;
    let mut data = x.data().to_vec();
    for n in 0..batch {
        for c in 0..channels {
            let b = bias.data()[c];
            let base = n * per_sample + c * hw;
            for v in &mut data[base..base + hw] {
                *v += b;
            }
        }
    }
    Ok(from_op(
        data,
        x.shape().to_vec(),
        &[x, bias],
        move |args| {
            let dx = args.needs(0).then(|| args.adjoint.to_vec());
            let db = args.needs(1).then(|| {
                let mut db = vec![T::zero(); channels];
                for n in 0..batch {
                    for (c, slot) in db.iter_mut().enumerate() {
                        let base = n * per_sample + c * hw;
                        for g in &args.adjoint[base..base + hw] {
                            *slot += *g;
                        }
                    }
                }
                db
            });
            vec![dx, db]
        },
    ))
}

/// Clamp to `[lo, hi]` without recording a gradient (data-prep helper).
pub fn clamp_data<T: Scalar>(a: &Tensor<T>, lo: f64, hi: f64) -> Tensor<T> {
    let lo = sc::<T>(lo);
    let hi = sc::<T>(hi);
    let data = a
        .data()
        .iter()
        .map(|x| {
            if *x < lo {
                lo
            } else if *x > hi {
                hi
            } else {
                *x
            }
        })
        .collect();
    Tensor::leaf(data, a.shape().to_vec(), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::autograd::backward;
    use crate::tensor::ops::sum;

    #[test]
    fn add_and_mul_shapes_must_match() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[3, 2]);
        assert!(add(&a, &b).is_err());
        assert!(mul(&a, &b).is_err());
    }

    #[test]
    fn sigmoid_tanh_ranges() {
        let x = Tensor::from_vec(vec![-50.0f32, -1.0, 0.0, 1.0, 50.0], &[5]).unwrap();
        for v in sigmoid(&x).iter() {
            assert!((0.0..=1.0).contains(v));
        }
        for v in tanh(&x).iter() {
            assert!((-1.0..=1.0).contains(v));
        }
    }

    #[test]
    fn channel_bias_batched() {
        let x = Tensor::from_vec((0..12).map(|v| v as f32).collect(), &[2, 2, 1, 3]).unwrap();
        let b = Tensor::from_vec(vec![10.0f32, 20.0], &[2]).unwrap().requires_grad();
        let y = add_channel_bias(&x, &b).unwrap();
        assert_eq!(y.data()[0], 10.0);
        assert_eq!(y.data()[3], 23.0);
        let loss = sum(&y);
        backward(&loss).unwrap();
        // Each channel spans 3 spatial positions in 2 batch samples.
        assert_eq!(b.grad().unwrap(), vec![6.0, 6.0]);
    }

    #[test]
    fn abs_subgradient_zero_at_origin() {
        let x = Tensor::from_vec(vec![-2.0f64, 0.0, 3.0], &[3])
            .unwrap()
            .requires_grad();
        let loss = sum(&abs(&x));
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![-1.0, 0.0, 1.0]);
    }
}
