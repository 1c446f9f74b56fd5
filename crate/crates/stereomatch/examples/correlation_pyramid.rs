//! The correlation machinery, step by step.
//!
//! Builds the per-row cost volume from feature maps, pools it into the
//! 4-level pyramid, samples it around a disparity estimate, and shows that
//! the memory-light on-the-fly path matches the materialized volume.
//!
//! ```bash
//! cargo run --release --example correlation_pyramid
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereomatch::audit::mem;
use stereomatch::correlation::{
    build_pyramid, build_volume, lookup, prepare_on_the_fly, LookupConfig,
};
use stereomatch::tensor::Tensor;

fn main() -> stereomatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, h, w) = (16usize, 8usize, 128usize);
    let feat = |rng: &mut ChaCha8Rng| -> stereomatch::Result<Tensor<f32>> {
        Tensor::from_vec(
            (0..d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[d, h, w],
        )
    };
    let left = feat(&mut rng)?;
    let right = feat(&mut rng)?;

    let volume = build_volume(&left, &right, true)?;
    println!("volume shape {:?} (row x left-x x right-x)", volume.shape());

    let pyramid = build_pyramid(&volume, 4)?;
    println!("pyramid last-dim widths: {:?}", pyramid.level_widths());

    // Sample around a constant disparity of 5.25 pixels.
    let cfg = LookupConfig::default();
    let disp = Tensor::full(&[1, h, w], 5.25f32);
    let feats = lookup(&pyramid, &disp, &cfg)?;
    println!(
        "lookup with radius {} over {} levels -> {:?} ({} channels per pixel)",
        cfg.radius,
        cfg.levels,
        feats.shape(),
        cfg.output_channels()
    );

    // The on-the-fly path: identical values, no quadratic buffer.
    let volume_bytes = (h * w * w * 4) as u64;
    let (otf_feats, peak) = mem::measure_peak(|| -> stereomatch::Result<Tensor<f32>> {
        prepare_on_the_fly(&left, &right, &cfg)?.lookup(&disp)
    });
    let otf_feats = otf_feats?;
    let max_diff = feats
        .iter()
        .zip(otf_feats.iter())
        .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    println!(
        "on-the-fly lookup: max |diff| {max_diff:.2e}, peak {peak} bytes vs {volume_bytes} for the volume"
    );
    assert!(max_diff < 1e-4);
    assert!(peak < volume_bytes);
    Ok(())
}
