//! Convex upsampling of a coarse disparity field.
//!
//! Each full-resolution pixel is a softmax-weighted convex combination of
//! its 3x3 coarse neighborhood, scaled into fine-pixel units. The example
//! demonstrates the two defining properties: weights sum to one (constant
//! fields stay constant) and outputs never leave the neighborhood hull.
//!
//! ```bash
//! cargo run --release --example convex_upsampling
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereomatch::tensor::Tensor;
use stereomatch::update::convex_upsample;

fn main() -> stereomatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (h, w, s) = (4usize, 6usize, 8usize);

    // A constant coarse field upsamples to the constant s*c.
    let constant = Tensor::full(&[1, h, w], 1.25f32);
    let logits = Tensor::from_vec(
        (0..s * s * 9 * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        &[s * s * 9, h, w],
    )?;
    let up = convex_upsample(&constant, &logits, s)?;
    let dev = up.iter().fold(0.0f32, |m, v| m.max((v - 1.25 * s as f32).abs()));
    println!(
        "constant field 1.25 -> {:?} of {} (max deviation {dev:.2e})",
        up.shape(),
        1.25 * s as f32
    );

    // A random coarse field stays inside the scaled 3x3 hull.
    let coarse = Tensor::from_vec(
        (0..h * w).map(|_| rng.gen_range(0.0..4.0)).collect(),
        &[1, h, w],
    )?;
    let up = convex_upsample(&coarse, &logits, s)?;
    let mut violations = 0;
    for cy in 0..h {
        for cx in 0..w {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let ny = (cy as i32 + dy).clamp(0, h as i32 - 1) as usize;
                    let nx = (cx as i32 + dx).clamp(0, w as i32 - 1) as usize;
                    let v = coarse.data()[ny * w + nx] * s as f32;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            for sy in 0..s {
                for sx in 0..s {
                    let v = up.data()[(cy * s + sy) * w * s + cx * s + sx];
                    if v < lo - 1e-4 || v > hi + 1e-4 {
                        violations += 1;
                    }
                }
            }
        }
    }
    println!(
        "random field: {} hull violations across {} fine pixels",
        violations,
        h * w * s * s
    );
    assert_eq!(violations, 0);
    Ok(())
}
