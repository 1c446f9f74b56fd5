//! Disparity evaluation: end-point error and bad-pixel ratios, plus the
//! PFM round trip used to exchange disparity maps on disk.
//!
//! ```bash
//! cargo run --release --example evaluate_metrics
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereomatch::io::pfm::{read_pfm, write_pfm};
use stereomatch::metrics::{compute_metrics, DEFAULT_THRESHOLDS};
use stereomatch::tensor::Tensor;

fn main() -> stereomatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (h, w) = (48usize, 64usize);

    // Ground truth plus a prediction with a known error profile: Gaussian
    // noise everywhere and a few gross outliers.
    let gt = Tensor::from_vec(
        (0..h * w).map(|_| rng.gen_range(0.0f32..20.0)).collect(),
        &[h, w],
    )?;
    let pred = Tensor::from_vec(
        gt.iter()
            .enumerate()
            .map(|(i, v)| {
                if i % 97 == 0 {
                    v + 8.0
                } else {
                    v + rng.gen_range(-0.75..0.75f32)
                }
            })
            .collect(),
        &[h, w],
    )?;

    let report = compute_metrics(&pred, &gt, None, &DEFAULT_THRESHOLDS)?;
    println!("{report}");
    for (t, pct) in &report.bad {
        println!("  error > {t:>3} px: {pct:5.2}% of pixels");
    }

    // Round-trip through PFM and confirm the metrics are unchanged.
    let dir = std::env::temp_dir().join("stereomatch_eval_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("pred.pfm");
    write_pfm(&path, &pred)?;
    let (back, scale) = read_pfm(&path)?;
    let report2 = compute_metrics(&back, &gt, None, &DEFAULT_THRESHOLDS)?;
    println!("after PFM round trip (scale {scale}): epe {:.6} px", report2.epe);
    assert_eq!(report.epe.to_bits(), report2.epe.to_bits());
    println!("metrics identical after round trip");
    Ok(())
}
