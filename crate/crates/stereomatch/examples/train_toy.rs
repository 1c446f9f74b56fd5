//! Short training run on synthetic stereo data.
//!
//! Trains the toy model for a few hundred steps (pass a step count as the
//! first argument for longer runs), checkpoints it, reloads the
//! checkpoint, and verifies the reloaded model scores identically.
//!
//! ```bash
//! cargo run --release --example train_toy -- 300
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stereomatch::io::checkpoint::load_model;
use stereomatch::model::StereoModel;
use stereomatch::training::{evaluate_on_samples, make_validation_set, train, TrainConfig};

fn main() -> stereomatch::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);

    let cfg = TrainConfig {
        steps,
        val_every: (steps / 4).max(1),
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = StereoModel::<f32>::new(&mut rng, &cfg.model)?;
    println!("training {} parameters for {steps} steps", model.param_count());

    let out_dir = std::env::temp_dir().join("stereomatch_train_toy");
    let report = train(&model, &cfg, &out_dir)?;
    println!("final loss {:.4}", report.final_loss);
    if let Some(val) = &report.final_val {
        println!("validation: {val}");
    }

    // Reload and confirm the checkpoint reproduces the validation score.
    let (restored, _) = load_model(&report.checkpoint_path)?;
    let val_set = make_validation_set(&cfg.synth, cfg.augment.crop, 10, cfg.seed)?;
    let a = evaluate_on_samples(&model, &val_set, cfg.val_iters, false)?;
    let b = evaluate_on_samples(&restored, &val_set, cfg.val_iters, false)?;
    println!("epe live {:.4} vs reloaded {:.4}", a.epe, b.epe);
    assert_eq!(a.epe.to_bits(), b.epe.to_bits());
    println!("checkpoint round trip is bit-exact");
    Ok(())
}
