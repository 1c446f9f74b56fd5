//! End-to-end inference on a generated stereo pair.
//!
//! Builds a synthetic scene with known ground truth, runs the recurrent
//! refinement with randomly initialized weights, writes the result as
//! PFM + colormapped PNG, and scores it against the ground truth.
//!
//! ```bash
//! cargo run --release --example infer_pair
//! ```
//! (An untrained model produces poor disparities; see `train_toy` for the
//! learned version.)

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stereomatch::io::image::save_disparity_png;
use stereomatch::io::pfm::write_pfm;
use stereomatch::metrics::{compute_metrics, DEFAULT_THRESHOLDS};
use stereomatch::model::{ModelConfig, RolloutOptions, StereoModel};
use stereomatch::training::{generate_with_mode, SynthConfig, SynthMode};

fn main() -> stereomatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = StereoModel::<f32>::new(&mut rng, &ModelConfig::toy())?;
    println!("toy model: {} parameters", model.param_count());

    let synth = SynthConfig {
        height: 96,
        width: 160,
        max_disp: 16.0,
        ..SynthConfig::default()
    };
    let sample = generate_with_mode(&mut rng, &synth, SynthMode::Rectangles, None)?;

    let opts = RolloutOptions::inference(16, model.cfg.encoder.levels)?;
    let start = std::time::Instant::now();
    let (field, _, stats) = model.run_inference(&sample.pair, &opts, false)?;
    println!(
        "16 refinement updates in {:.1} ms ({} MACs in the GRUs)",
        start.elapsed().as_secs_f64() * 1e3,
        stats.total_gru_macs()
    );

    let report = compute_metrics(
        &field.values,
        &sample.disparity,
        Some(&sample.mask),
        &DEFAULT_THRESHOLDS,
    )?;
    println!("untrained model vs ground truth: {report}");

    let out_dir = std::env::temp_dir().join("stereomatch_infer_pair");
    std::fs::create_dir_all(&out_dir)?;
    write_pfm(&out_dir.join("disparity.pfm"), &field.values)?;
    save_disparity_png(&out_dir.join("disparity.png"), &field.values)?;
    println!("wrote {}", out_dir.join("disparity.pfm").display());
    Ok(())
}
