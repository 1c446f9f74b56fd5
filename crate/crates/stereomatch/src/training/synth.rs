//! Synthetic stereo pairs with exact ground truth.
//!
//! A textured right image is generated first; the left image samples it at
//! `x - d(x, y)` so the ground-truth disparity holds by construction (up
//! to the linear interpolation used for fractional disparities). Pixels
//! whose correspondence falls outside the right image are masked invalid.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::ImagePair;
use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// Fronto-parallel plane: constant disparity.
    Constant,
    /// Piecewise-constant disparity from stacked random rectangles.
    Rectangles,
    /// Smooth disparity ramp.
    Ramp,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub max_disp: f64,
    pub modes: Vec<SynthMode>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 96,
            width: 160,
            max_disp: 16.0,
            modes: vec![SynthMode::Constant, SynthMode::Rectangles],
        }
    }
}

/// One generated training example.
pub struct SyntheticSample<T: Scalar> {
    pub pair: ImagePair<T>,
    /// Ground-truth disparity on the left-image grid, `[1, H, W]`.
    pub disparity: Tensor<T>,
    /// 1 where the correspondence is inside the right image, else 0.
    pub mask: Tensor<T>,
}

/// Smooth random texture: a coarse bilinear field plus fine detail.
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let cell = 8usize;
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let coarse: Vec<f64> = (0..3 * gh * gw).map(|_| rng.gen_range(0.0..1.0)).collect();
    let fine: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(-0.08..0.08)).collect();
    let mut out = vec![0.0f64; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            let gy = y as f64 / cell as f64;
            let y0 = gy.floor() as usize;
            let fy = gy - y0 as f64;
            for x in 0..w {
                let gx = x as f64 / cell as f64;
                let x0 = gx.floor() as usize;
                let fx = gx - x0 as f64;
                let at = |yy: usize, xx: usize| coarse[(c * gh + yy) * gw + xx];
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x0 + 1) * (1.0 - fy) * fx
                    + at(y0 + 1, x0) * fy * (1.0 - fx)
                    + at(y0 + 1, x0 + 1) * fy * fx;
                out[(c * h + y) * w + x] = (v + fine[(c * h + y) * w + x]).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn disparity_field(rng: &mut ChaCha8Rng, cfg: &SynthConfig, mode: SynthMode) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let max = cfg.max_disp;
    match mode {
        SynthMode::Constant => {
            let d = rng.gen_range(0.25 * max..=max);
            vec![d; h * w]
        }
        SynthMode::Rectangles => {
            let bg = rng.gen_range(0.0..0.3 * max);
            let mut field = vec![bg; h * w];
            let count = rng.gen_range(2..=5usize);
            // Draw rectangles nearest-last so larger disparities win.
            let mut rects: Vec<(usize, usize, usize, usize, f64)> = (0..count)
                .map(|_| {
                    let rw = rng.gen_range(w / 8..w / 2);
                    let rh = rng.gen_range(h / 8..h / 2);
                    let x0 = rng.gen_range(0..w - rw);
                    let y0 = rng.gen_range(0..h - rh);
                    let d = rng.gen_range((bg + 1.0).min(max)..=max);
                    (x0, y0, rw, rh, d)
                })
                .collect();
            rects.sort_by(|a, b| a.4.partial_cmp(&b.4).unwrap());
            for (x0, y0, rw, rh, d) in rects {
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        field[y * w + x] = d;
                    }
                }
            }
            field
        }
        SynthMode::Ramp => {
            let a = rng.gen_range(0.0..max);
            let b = rng.gen_range(0.0..max);
            let ytilt = rng.gen_range(-0.2 * max..0.2 * max);
            let mut field = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let v = a
                        + (b - a) * x as f64 / (w - 1).max(1) as f64
                        + ytilt * y as f64 / (h - 1).max(1) as f64;
                    field[y * w + x] = v.clamp(0.0, max);
                }
            }
            field
        }
    }
}

/// Generate a sample with a mode drawn from `cfg.modes`.
pub fn generate_synthetic<T: Scalar>(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
) -> Result<SyntheticSample<T>> {
    if cfg.modes.is_empty() {
        return Err(Error::contract("generate_synthetic", "no modes configured"));
    }
    let mode = cfg.modes[rng.gen_range(0..cfg.modes.len())];
    generate_with_mode(rng, cfg, mode, None)
}

/// Generate a sample with an explicit mode, optionally pinning the
/// constant-mode disparity value.
pub fn generate_with_mode<T: Scalar>(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    mode: SynthMode,
    constant_disp: Option<f64>,
) -> Result<SyntheticSample<T>> {
    let (h, w) = (cfg.height, cfg.width);
    if h == 0 || w == 0 {
        return Err(Error::contract("generate_synthetic", "empty extents"));
    }
    if cfg.max_disp >= w as f64 / 2.0 {
        return Err(Error::contract(
            "generate_synthetic",
            format!("max_disp {} must stay below W/2 = {}", cfg.max_disp, w / 2),
        ));
    }
    let right = texture(rng, h, w);
    let mut field = disparity_field(rng, cfg, mode);
    if let Some(d) = constant_disp {
        if mode == SynthMode::Constant {
            field.fill(d);
        }
    }

    // Left image: horizontal backward warp of the right texture. Clamped
    // sampling keeps masked-out border pixels photometrically plausible.
    let mut left = vec![0.0f64; 3 * h * w];
    let mut mask = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let d = field[y * w + x];
            let src = x as f64 - d;
            let valid = src >= 0.0 && src <= (w - 1) as f64;
            if valid {
                mask[y * w + x] = T::one();
            }
            let clamped = src.clamp(0.0, (w - 1) as f64);
            let x0 = clamped.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let f = clamped - x0 as f64;
            for c in 0..3 {
                let row = &right[(c * h + y) * w..(c * h + y + 1) * w];
                left[(c * h + y) * w + x] = row[x0] * (1.0 - f) + row[x1] * f;
            }
        }
    }

    let to_tensor = |v: &[f64], shape: &[usize]| {
        Tensor::from_vec(v.iter().map(|x| sc::<T>(*x)).collect(), shape)
    };
    let pair = ImagePair::new(
        to_tensor(&left, &[3, h, w])?,
        to_tensor(&right, &[3, h, w])?,
    )?;
    Ok(SyntheticSample {
        pair,
        disparity: to_tensor(&field, &[1, h, w])?,
        mask: Tensor::from_vec(mask, &[1, h, w])?,
    })
}
