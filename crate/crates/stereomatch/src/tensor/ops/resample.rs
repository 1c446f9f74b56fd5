//! Pooling, rescaling, and 1-d linear sampling.

use crate::error::{Error, Result};
use crate::tensor::autograd::from_op;
use crate::tensor::{sc, Scalar, Tensor};

/// Average-pool the last dimension with kernel 2 / stride 2.
///
/// Odd lengths replicate the final element before pooling, so the output
/// length is `ceil(L / 2)` and pyramids stay constructible for any width.
pub fn avgpool_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    if rank == 0 {
        return Err(Error::contract("avgpool_lastdim", "rank-0 input"));
    }
    let l = x.shape()[rank - 1];
    if l == 0 {
        return Err(Error::contract("avgpool_lastdim", "empty last dimension"));
    }
    let l_out = l.div_ceil(2);
    let rows: usize = x.shape()[..rank - 1].iter().product();
    let half = sc::<T>(0.5);
    let mut data = vec![T::zero(); rows * l_out];
    for r in 0..rows {
        let src = &x.data()[r * l..(r + 1) * l];
        let dst = &mut data[r * l_out..(r + 1) * l_out];
        for (i, o) in dst.iter_mut().enumerate() {
            let a = src[2 * i];
            let b = src[(2 * i + 1).min(l - 1)];
            *o = (a + b) * half;
        }
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[rank - 1] = l_out;
    Ok(from_op(data, out_shape, &[x], move |args| {
        vec![args.needs(0).then(|| {
            let mut dx = vec![T::zero(); rows * l];
            for r in 0..rows {
                let g = &args.adjoint[r * l_out..(r + 1) * l_out];
                let dst = &mut dx[r * l..(r + 1) * l];
                for (i, gv) in g.iter().enumerate() {
                    dst[2 * i] += *gv * half;
                    dst[(2 * i + 1).min(l - 1)] += *gv * half;
                }
            }
            dx
        })]
    }))
}

fn spatial_layout<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let rank = x.shape().len();
    if rank < 2 {
        return Err(Error::contract(op, "need at least 2 dims"));
    }
    let h = x.shape()[rank - 2];
    let w = x.shape()[rank - 1];
    let planes: usize = x.shape()[..rank - 2].iter().product();
    Ok((planes, h, w))
}

/// Double both spatial extents by bilinear interpolation (half-pixel
/// centers, replicated borders). Constant fields map to constant fields.
pub fn upsample2x_bilinear<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = spatial_layout("upsample2x", x)?;
    let (h2, w2) = (h * 2, w * 2);
    // Precompute per-axis taps: out coordinate -> (i0, i1, weight for i1).
    let taps = |n: usize, n_out: usize| -> Vec<(usize, usize, T)> {
        (0..n_out)
            .map(|o| {
                let src = (o as f64 + 0.5) / 2.0 - 0.5;
                let i0 = src.floor();
                let f = src - i0;
                let a = (i0 as isize).clamp(0, n as isize - 1) as usize;
                let b = (i0 as isize + 1).clamp(0, n as isize - 1) as usize;
                (a, b, sc::<T>(f))
            })
            .collect()
    };
    let ty = taps(h, h2);
    let tx = taps(w, w2);
    let mut data = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut data[p * h2 * w2..(p + 1) * h2 * w2];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let one = T::one();
                let v = src[y0 * w + x0] * (one - fy) * (one - fx)
                    + src[y0 * w + x1] * (one - fy) * fx
                    + src[y1 * w + x0] * fy * (one - fx)
                    + src[y1 * w + x1] * fy * fx;
                dst[oy * w2 + ox] = v;
            }
        }
    }
    let mut out_shape = x.shape().to_vec();
    let rank = out_shape.len();
    out_shape[rank - 2] = h2;
    out_shape[rank - 1] = w2;
    Ok(from_op(data, out_shape, &[x], move |args| {
        vec![args.needs(0).then(|| {
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let g = &args.adjoint[p * h2 * w2..(p + 1) * h2 * w2];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = g[oy * w2 + ox];
                        let one = T::one();
                        dst[y0 * w + x0] += gv * (one - fy) * (one - fx);
                        dst[y0 * w + x1] += gv * (one - fy) * fx;
                        dst[y1 * w + x0] += gv * fy * (one - fx);
                        dst[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            dx
        })]
    }))
}

/// Halve both spatial extents by 2x2 mean pooling. Odd extents are a
/// dimension error (the output extent would not be integral).
pub fn downsample2x_mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = spatial_layout("downsample2x", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(
            "downsample2x",
            format!("extents {h}x{w} are not divisible by 2"),
        ));
    }
    let (h2, w2) = (h / 2, w / 2);
    let quarter = sc::<T>(0.25);
    let mut data = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut data[p * h2 * w2..(p + 1) * h2 * w2];
        for oy in 0..h2 {
            for ox in 0..w2 {
                let base = 2 * oy * w + 2 * ox;
                dst[oy * w2 + ox] =
                    (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter;
            }
        }
    }
    let mut out_shape = x.shape().to_vec();
    let rank = out_shape.len();
    out_shape[rank - 2] = h2;
    out_shape[rank - 1] = w2;
    Ok(from_op(data, out_shape, &[x], move |args| {
        vec![args.needs(0).then(|| {
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let g = &args.adjoint[p * h2 * w2..(p + 1) * h2 * w2];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for oy in 0..h2 {
                    for ox in 0..w2 {
                        let gv = g[oy * w2 + ox] * quarter;
                        let base = 2 * oy * w + 2 * ox;
                        dst[base] += gv;
                        dst[base + 1] += gv;
                        dst[base + w] += gv;
                        dst[base + w + 1] += gv;
                    }
                }
            }
            dx
        })]
    }))
}

/// Rescale the two trailing spatial dims by a factor of 2 (bilinear) or
/// 1/2 (2x2 mean). Other factors are rejected.
pub fn interpolate2d<T: Scalar>(x: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
    if factor == 2.0 {
        upsample2x_bilinear(x)
    } else if factor == 0.5 {
        downsample2x_mean(x)
    } else {
        Err(Error::contract(
            "interpolate2d",
            format!("unsupported factor {factor}; expected 2 or 1/2"),
        ))
    }
}

/// Linear interpolation into a 1-d tensor at a (scalar-tensor) coordinate,
/// with zero padding outside `[0, len-1]`. Differentiable in both the row
/// values and the coordinate.
pub fn bilinear_sample_1d<T: Scalar>(row: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if row.shape().len() != 1 {
        return Err(Error::contract(
            "bilinear_sample_1d",
            format!("expected 1-d row, got {:?}", row.shape()),
        ));
    }
    if x.len() != 1 {
        return Err(Error::contract(
            "bilinear_sample_1d",
            "coordinate must be scalar",
        ));
    }
    let l = row.shape()[0] as i64;
    let coord = x.item().as_f64();
    let i0 = coord.floor() as i64;
    let f = sc::<T>(coord - coord.floor());
    let tap = |i: i64| -> T {
        if i >= 0 && i < l {
            row.data()[i as usize]
        } else {
            T::zero()
        }
    };
    let v0 = tap(i0);
    let v1 = tap(i0 + 1);
    let out = v0 * (T::one() - f) + v1 * f;
    Ok(from_op(vec![out], vec![1], &[row, x], move |args| {
        let row = args.parents[0].data();
        let g = args.adjoint[0];
        let tap = |i: i64| -> T {
            if i >= 0 && i < l {
                row[i as usize]
            } else {
                T::zero()
            }
        };
        let drow = args.needs(0).then(|| {
            let mut d = vec![T::zero(); row.len()];
            if (0..l).contains(&i0) {
                d[i0 as usize] = g * (T::one() - f);
            }
            if (0..l).contains(&(i0 + 1)) {
                d[(i0 + 1) as usize] = g * f;
            }
            d
        });
        let dx = args
            .needs(1)
            .then(|| vec![g * (tap(i0 + 1) - tap(i0))]);
        vec![drow, dx]
    }))
}
