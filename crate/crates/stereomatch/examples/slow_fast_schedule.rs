//! Slow-fast scheduling: fewer fine-resolution updates, most of the
//! accuracy, a fraction of the compute.
//!
//! Measures the per-level GRU cost on a paper-scale configuration and
//! compares the total GRU MACs of the regular 32-update rollout against
//! the 30/20/10 slow-fast schedule. Also shows that an equal-count
//! slow-fast schedule reproduces the regular rollout bitwise.
//!
//! ```bash
//! cargo run --release --example slow_fast_schedule
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereomatch::encoders::ImagePair;
use stereomatch::model::{ModelConfig, RolloutOptions, StereoModel};
use stereomatch::nn::Phase;
use stereomatch::tensor::Tensor;
use stereomatch::update::IterationSchedule;

fn main() -> stereomatch::Result<()> {
    // Paper-scale channel widths (the FLOP ratio depends on them), but a
    // small image so the example stays quick.
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = StereoModel::<f32>::new(&mut rng, &cfg)?;
    println!("default model: {} parameters", model.param_count());

    let (h, w) = (64usize, 128usize);
    let mut img = |rng: &mut ChaCha8Rng| -> stereomatch::Result<Tensor<f32>> {
        Tensor::from_vec(
            (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
            &[3, h, w],
        )
    };
    let pair = ImagePair::new(img(&mut rng)?, img(&mut rng)?)?;

    let run = |schedule: IterationSchedule| -> stereomatch::Result<_> {
        let opts = RolloutOptions {
            schedule,
            keep_all: false,
            on_the_fly: false,
            phase: Phase::Eval,
        };
        model.run_inference(&pair, &opts, false)
    };

    let (_, _, regular) = run(IterationSchedule::regular(3, 32)?)?;
    let (_, _, slowfast) = run(IterationSchedule::slow_fast(&[10, 20, 30])?)?;

    println!("per-update GRU cost (MACs):");
    for level in 0..3 {
        println!(
            "  level {level}: {:>12.0}  ({} regular updates, {} slow-fast)",
            regular.macs_per_update(level),
            regular.gru_updates[level],
            slowfast.gru_updates[level],
        );
    }
    let ratio = regular.macs_per_update(0) / regular.macs_per_update(1);
    println!("finest : middle per-update ratio = {ratio:.2}");

    let frac = slowfast.total_gru_macs() as f64 / regular.total_gru_macs() as f64;
    println!(
        "slow-fast 30/20/10 uses {:.1}% of the regular 32/32/32 GRU MACs",
        frac * 100.0
    );

    // Equal counts degenerate to the regular rollout, bit for bit.
    let (a, _, _) = run(IterationSchedule::regular(3, 6)?)?;
    let (b, _, _) = run(IterationSchedule::slow_fast(&[6, 6, 6])?)?;
    assert_eq!(
        a.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    println!("slow-fast (6,6,6) == regular 6-iteration rollout, bitwise");
    Ok(())
}
