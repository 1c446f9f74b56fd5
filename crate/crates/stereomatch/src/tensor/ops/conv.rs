//! 2-d cross-correlation (convolution without kernel flip) via im2col + GEMM.
//!
//! The column buffer is rebuilt during the backward pass instead of being
//! captured; the GEMMs dominate the cost either way and the graph stays lean.

use crate::error::{Error, Result};
use crate::tensor::autograd::from_op;
use crate::tensor::{Scalar, Tensor};

use super::matmul::{gemm_acc, gemm_at_acc, gemm_bt_acc};

#[derive(Clone, Copy)]
struct ConvDims {
    batch: usize,
    batched_input: bool,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

fn plan<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let (batch, batched_input, c_in, h, w) = match x.shape() {
        [c, h, w] => (1, false, *c, *h, *w),
        [n, c, h, w] => (*n, true, *c, *h, *w),
        _ => {
            return Err(Error::contract(
                "conv2d",
                format!("expected 3-d or 4-d input, got {:?}", x.shape()),
            ))
        }
    };
    let [c_out, wc, kh, kw] = *weights.shape() else {
        return Err(Error::contract(
            "conv2d",
            format!("expected 4-d weights, got {:?}", weights.shape()),
        ));
    };
    if wc != c_in {
        return Err(Error::shape("conv2d", x.shape(), weights.shape()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::contract(
            "conv2d",
            format!("kernel extents must be odd, got {kh}x{kw}"),
        ));
    }
    if stride == 0 {
        return Err(Error::contract("conv2d", "stride must be positive"));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::shape("conv2d", x.shape(), weights.shape()));
    }
    Ok(ConvDims {
        batch,
        batched_input,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        padding,
        h_out: (h + 2 * padding - kh) / stride + 1,
        w_out: (w + 2 * padding - kw) / stride + 1,
    })
}

/// Gather one sample into `[C*kh*kw, h_out*w_out]` column-major patches.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let ConvDims {
        c_in,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        h_out,
        w_out,
        ..
    } = *d;
    let plane = h_out * w_out;
    for c in 0..c_in {
        let src_plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((c * kh + ky) * kw + kx) * plane
                    ..((c * kh + ky) * kw + kx + 1) * plane];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst = &mut row[oy * w_out..(oy + 1) * w_out];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &src_plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, slot) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        *slot = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `[C*kh*kw, h_out*w_out]` columns back onto an input plane.
fn col2im_acc<T: Scalar>(cols: &[T], d: &ConvDims, x: &mut [T]) {
    let ConvDims {
        c_in,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        h_out,
        w_out,
        ..
    } = *d;
    let plane = h_out * w_out;
    for c in 0..c_in {
        let dst_plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row =
                    &cols[((c * kh + ky) * kw + kx) * plane..((c * kh + ky) * kw + kx + 1) * plane];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst_plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * w_out..(oy + 1) * w_out];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlate `x` with `weights` (`[C_out, C_in, kh, kw]`).
///
/// Accepts `[C, H, W]` or `[N, C, H, W]` inputs and returns the matching
/// rank. Output extents follow `(H + 2*padding - kh) / stride + 1`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let d = plan(x, weights, stride, padding)?;
    let ckk = d.c_in * d.kh * d.kw;
    let plane = d.h_out * d.w_out;
    let sample_in = d.c_in * d.h * d.w;
    let sample_out = d.c_out * plane;

    let mut cols = vec![T::zero(); ckk * plane];
    let mut out = vec![T::zero(); d.batch * sample_out];
    for n in 0..d.batch {
        im2col(&x.data()[n * sample_in..(n + 1) * sample_in], &d, &mut cols);
        gemm_acc(
            weights.data(),
            &cols,
            &mut out[n * sample_out..(n + 1) * sample_out],
            d.c_out,
            ckk,
            plane,
        );
    }

    let out_shape = if d.batched_input {
        vec![d.batch, d.c_out, d.h_out, d.w_out]
    } else {
        vec![d.c_out, d.h_out, d.w_out]
    };
    Ok(from_op(out, out_shape, &[x, weights], move |args| {
        let xdat = args.parents[0].data();
        let wdat = args.parents[1].data();
        let mut cols = vec![T::zero(); ckk * plane];
        let mut dx = args
            .needs(0)
            .then(|| vec![T::zero(); d.batch * sample_in]);
        let mut dw = args.needs(1).then(|| vec![T::zero(); d.c_out * ckk]);
        let mut dcols = args.needs(0).then(|| vec![T::zero(); ckk * plane]);
        for n in 0..d.batch {
            let g = &args.adjoint[n * sample_out..(n + 1) * sample_out];
            if dw.is_some() {
                im2col(&xdat[n * sample_in..(n + 1) * sample_in], &d, &mut cols);
                gemm_bt_acc(g, &cols, dw.as_mut().unwrap(), d.c_out, plane, ckk);
            }
            if let (Some(dx), Some(dcols)) = (dx.as_mut(), dcols.as_mut()) {
                dcols.fill(T::zero());
                gemm_at_acc(wdat, g, dcols, ckk, d.c_out, plane);
                col2im_acc(dcols, &d, &mut dx[n * sample_in..(n + 1) * sample_in]);
            }
        }
        vec![dx, dw]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation reference used to pin the GEMM path.
    pub(crate) fn conv2d_oracle<T: Scalar>(
        x: &[T],
        shape: (usize, usize, usize),
        w: &[T],
        wshape: (usize, usize, usize, usize),
        stride: usize,
        padding: usize,
    ) -> Vec<T> {
        let (c_in, h, wd) = shape;
        let (c_out, _, kh, kw) = wshape;
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (wd + 2 * padding - kw) / stride + 1;
        let mut out = vec![T::zero(); c_out * h_out * w_out];
        for o in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = T::zero();
                    for c in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[(c * h + iy as usize) * wd + ix as usize]
                                    * w[((o * c_in + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(o * h_out + oy) * w_out + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_identity_kernel() {
        let x = Tensor::from_vec((0..12).map(|v| v as f32).collect(), &[1, 3, 4]).unwrap();
        let w = Tensor::from_vec(vec![1.0f32], &[1, 1, 1, 1]).unwrap();
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_kernel_on_constant_interior() {
        let c = 0.5f32;
        let x = Tensor::full(&[1, 5, 6], c);
        let w = Tensor::from_vec(vec![1.0f32; 9], &[1, 1, 3, 3]).unwrap();
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 6]);
        // Interior positions see the full 3x3 window.
        for iy in 1..4 {
            for ix in 1..5 {
                assert!((y.data()[iy * 6 + ix] - 9.0 * c).abs() < 1e-6);
            }
        }
        // A corner only sees 4 taps.
        assert!((y.data()[0] - 4.0 * c).abs() < 1e-6);
    }

    #[test]
    fn stride_two_halves_even_padded_extent() {
        let x = Tensor::<f32>::zeros(&[2, 8, 12]);
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        let y = conv2d(&x, &w, 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 4, 6]);
    }

    #[test]
    fn matches_direct_summation_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1), (2, 2)] {
            let (c_in, h, w) = (3, 7, 9);
            let (c_out, kh, kw) = (4, 3, 5);
            let x: Vec<f32> = (0..c_in * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wt: Vec<f32> = (0..c_out * c_in * kh * kw)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let xt = Tensor::from_vec(x.clone(), &[c_in, h, w]).unwrap();
            let wtt = Tensor::from_vec(wt.clone(), &[c_out, c_in, kh, kw]).unwrap();
            let y = conv2d(&xt, &wtt, stride, padding).unwrap();
            let oracle = conv2d_oracle(&x, (c_in, h, w), &wt, (c_out, c_in, kh, kw), stride, padding);
            for (a, b) in y.data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b} (stride {stride} pad {padding})");
            }
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &w, 1, 1).is_err());
    }

    #[test]
    fn even_kernel_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(conv2d(&x, &w, 1, 0).is_err());
    }

    #[test]
    fn batched_equals_stacked_single() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f32> = (0..2 * 2 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..3 * 2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xb = Tensor::from_vec(x.clone(), &[2, 2, 5, 5]).unwrap();
        let wt = Tensor::from_vec(w, &[3, 2, 3, 3]).unwrap();
        let yb = conv2d(&xb, &wt, 1, 1).unwrap();
        assert_eq!(yb.shape(), &[2, 3, 5, 5]);
        for n in 0..2 {
            let xs = Tensor::from_vec(x[n * 50..(n + 1) * 50].to_vec(), &[2, 5, 5]).unwrap();
            let ys = conv2d(&xs, &wt, 1, 1).unwrap();
            assert_eq!(&yb.data()[n * 75..(n + 1) * 75], ys.data());
        }
    }
}
