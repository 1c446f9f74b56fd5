//! Photometric and geometric training augmentation.
//!
//! Saturation is adjusted identically on both images; horizontal stretch
//! rescales the image x-axis and multiplies the disparity by the same
//! factor; a small vertical shift of the right image simulates imperfect
//! rectification; finally an aligned random crop is taken.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::ImagePair;
use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};

use super::synth::SyntheticSample;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Master switch consulted by the training loop; `augment` itself is
    /// unconditional.
    pub enabled: bool,
    /// Saturation factor range; 0 means greyscale.
    pub saturation_range: (f64, f64),
    /// Horizontal stretch exponent range: factor = 2^u.
    pub stretch_log2_range: (f64, f64),
    /// Max vertical shift (pixels) applied to the right image only.
    pub vertical_perturb: f64,
    /// Output crop (height, width).
    pub crop: (usize, usize),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            enabled: true,
            saturation_range: (0.0, 1.4),
            stretch_log2_range: (-0.2, 0.4),
            vertical_perturb: 0.5,
            crop: (64, 128),
        }
    }
}

fn layout<T: Scalar>(img: &Tensor<T>) -> (usize, usize, usize) {
    let [c, h, w] = *img.shape() else {
        unreachable!("ImagePair guarantees [3, H, W]")
    };
    (c, h, w)
}

fn adjust_saturation<T: Scalar>(img: &Tensor<T>, factor: f64) -> Tensor<T> {
    let (c, h, w) = layout(img);
    debug_assert_eq!(c, 3);
    let src = img.data();
    let mut out = vec![T::zero(); src.len()];
    let f = factor;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (r, g, b) = (
                src[i].as_f64(),
                src[h * w + i].as_f64(),
                src[2 * h * w + i].as_f64(),
            );
            let grey = 0.299 * r + 0.587 * g + 0.114 * b;
            out[i] = sc((grey + f * (r - grey)).clamp(0.0, 1.0));
            out[h * w + i] = sc((grey + f * (g - grey)).clamp(0.0, 1.0));
            out[2 * h * w + i] = sc((grey + f * (b - grey)).clamp(0.0, 1.0));
        }
    }
    Tensor::from_vec(out, img.shape()).expect("saturation shape")
}

/// Resample columns by `factor` (clamped border sampling).
fn stretch_x<T: Scalar>(img: &Tensor<T>, new_w: usize, factor: f64) -> Tensor<T> {
    let (c, h, w) = layout(img);
    let src = img.data();
    let mut out = vec![T::zero(); c * h * new_w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut out[(ch * h + y) * new_w..(ch * h + y + 1) * new_w];
            for (x, slot) in dst.iter_mut().enumerate() {
                let sx = (x as f64 / factor).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let f = sx - x0 as f64;
                *slot = sc(row[x0].as_f64() * (1.0 - f) + row[x1].as_f64() * f);
            }
        }
    }
    Tensor::from_vec(out, &[c, h, new_w]).expect("stretch shape")
}

/// Conservative nearest mask resample: valid only when both interpolation
/// neighbors were valid.
fn stretch_mask<T: Scalar>(mask: &Tensor<T>, new_w: usize, factor: f64) -> Tensor<T> {
    let (_c, h, w) = layout(mask);
    let src = mask.data();
    let mut out = vec![T::zero(); h * new_w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..new_w {
            let sx = (x as f64 / factor).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            if row[x0] > T::zero() && row[x1] > T::zero() {
                out[y * new_w + x] = T::one();
            }
        }
    }
    Tensor::from_vec(out, &[1, h, new_w]).expect("mask shape")
}

fn shift_y<T: Scalar>(img: &Tensor<T>, delta: f64) -> Tensor<T> {
    let (c, h, w) = layout(img);
    let src = img.data();
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y as f64 - delta).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let f = sy - y0 as f64;
            for x in 0..w {
                let v = src[(ch * h + y0) * w + x].as_f64() * (1.0 - f)
                    + src[(ch * h + y1) * w + x].as_f64() * f;
                out[(ch * h + y) * w + x] = sc(v);
            }
        }
    }
    Tensor::from_vec(out, img.shape()).expect("shift shape")
}

fn crop<T: Scalar>(img: &Tensor<T>, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor<T> {
    let (c, h, w) = layout(img);
    let src = img.data();
    let mut out = Vec::with_capacity(c * ch * cw);
    for chan in 0..c {
        for y in y0..y0 + ch {
            let base = (chan * h + y) * w + x0;
            out.extend_from_slice(&src[base..base + cw]);
        }
    }
    Tensor::from_vec(out, &[c, ch, cw]).expect("crop shape")
}

/// Apply the configured augmentations. Deterministic for a fixed rng seed.
pub fn augment<T: Scalar>(
    sample: &SyntheticSample<T>,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticSample<T>> {
    // Draw all randomness up front in a fixed order.
    let sat = rng.gen_range(cfg.saturation_range.0..=cfg.saturation_range.1);
    let stretch = rng
        .gen_range(cfg.stretch_log2_range.0..=cfg.stretch_log2_range.1)
        .exp2();
    let vshift = if cfg.vertical_perturb > 0.0 {
        rng.gen_range(-cfg.vertical_perturb..=cfg.vertical_perturb)
    } else {
        0.0
    };

    let (_, h, w) = layout(&sample.pair.left);
    let new_w = ((w as f64 * stretch).floor() as usize).max(1);
    let (crop_h, crop_w) = cfg.crop;
    if crop_h > h || crop_w > new_w {
        return Err(Error::contract(
            "augment",
            format!("crop {crop_h}x{crop_w} exceeds stretched image {h}x{new_w}"),
        ));
    }

    let left = adjust_saturation(&sample.pair.left, sat);
    let right = adjust_saturation(&sample.pair.right, sat);

    let left = stretch_x(&left, new_w, stretch);
    let right = stretch_x(&right, new_w, stretch);
    // Disparity is resampled on the same grid and scaled by the factor.
    let disp_scaled = {
        let resampled = stretch_x(&sample.disparity, new_w, stretch);
        let data: Vec<T> = resampled.data().iter().map(|v| *v * sc::<T>(stretch)).collect();
        Tensor::from_vec(data, resampled.shape())?
    };
    let mask = stretch_mask(&sample.mask, new_w, stretch);

    let right = if vshift != 0.0 {
        shift_y(&right, vshift)
    } else {
        right
    };

    let y0 = rng.gen_range(0..=h - crop_h);
    let x0 = rng.gen_range(0..=new_w - crop_w);
    Ok(SyntheticSample {
        pair: ImagePair::new(
            crop(&left, y0, x0, crop_h, crop_w),
            crop(&right, y0, x0, crop_h, crop_w),
        )?,
        disparity: crop(&disp_scaled, y0, x0, crop_h, crop_w),
        mask: crop(&mask, y0, x0, crop_h, crop_w),
    })
}
