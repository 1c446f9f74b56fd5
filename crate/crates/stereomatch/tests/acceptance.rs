//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Criteria that measure the global MAC/byte counters or train models are
//! serialized through a single gate so concurrent tests cannot pollute
//! the measurements. The toy-training criteria (A6/A8/A10) share trained
//! checkpoints produced once per process.

use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereomatch::audit::mem;
use stereomatch::correlation::{
    build_pyramid, build_volume, lookup, prepare_on_the_fly, LookupConfig,
};
use stereomatch::encoders::{EncoderConfig, ImagePair};
use stereomatch::io::checkpoint::{load_model, Checkpoint};
use stereomatch::io::pfm::{read_pfm_from, write_pfm_to};
use stereomatch::model::{ModelConfig, RolloutOptions, StereoModel};
use stereomatch::nn::Phase;
use stereomatch::tensor::gradcheck::{builtin_op_checks, check_params_fd, GradCheck};
use stereomatch::tensor::{no_grad, ops, Tensor};
use stereomatch::training::{
    evaluate_on_samples, make_validation_set, median_epe_per_sample, sequence_loss, train,
    TrainConfig,
};
use stereomatch::update::{convex_upsample, IterationSchedule};

fn gate() -> MutexGuard<'static, ()> {
    static GATE: Mutex<()> = Mutex::new(());
    GATE.lock().unwrap_or_else(|poison| poison.into_inner())
}

fn rand_feat(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_vec(
        (0..d * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        &[d, h, w],
    )
    .unwrap()
}

#[test]
fn a1_correlation_volume_matches_triple_loop_oracle() {
    let _g = gate();
    let start = Instant::now();
    let (d, h, w) = (8usize, 4usize, 6usize);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rand_feat(&mut rng, d, h, w);
        let g = rand_feat(&mut rng, d, h, w);
        let vol = build_volume(&f, &g, true).unwrap();
        let scale = 1.0 / (d as f32).sqrt();
        let mut worst = 0.0f32;
        for i in 0..h {
            for j in 0..w {
                for k in 0..w {
                    let mut acc = 0.0f32;
                    for ch in 0..d {
                        acc += f.data()[ch * h * w + i * w + j] * g.data()[ch * h * w + i * w + k];
                    }
                    worst = worst.max((acc * scale - vol.data()[i * w * w + j * w + k]).abs());
                }
            }
        }
        assert!(worst < 1e-5, "seed {seed}: max abs diff {worst}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}, budget 1 s");
    println!("ACCEPTANCE A1 PASS — 100 seeds, 4x6xD8 volume vs triple loop, {elapsed:?}");
}

#[test]
fn a2_pyramid_widths_and_exact_pairwise_means() {
    let _g = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w) = (3usize, 64usize);
    let vol64 = Tensor::<f64>::from_vec(
        (0..h * w * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        &[h, w, w],
    )
    .unwrap();
    let pyr = build_pyramid(&vol64, 4).unwrap();
    assert_eq!(pyr.level_widths(), vec![64, 32, 16, 8]);
    for k in 1..4 {
        let prev = &pyr.levels[k - 1];
        let cur = &pyr.levels[k];
        let lp = *prev.shape().last().unwrap();
        let lc = *cur.shape().last().unwrap();
        for row in 0..cur.len() / lc {
            for i in 0..lc {
                let mean = (prev.data()[row * lp + 2 * i] + prev.data()[row * lp + 2 * i + 1]) * 0.5;
                let got = cur.data()[row * lc + i];
                assert_eq!(
                    got.to_bits(),
                    mean.to_bits(),
                    "level {k} row {row} entry {i}: {got} vs {mean}"
                );
            }
        }
    }
    println!("ACCEPTANCE A2 PASS — widths [64, 32, 16, 8]; every level an exact pairwise mean (f64, bitwise)");
}

#[test]
fn a3_lookup_endpoints_and_on_the_fly_equivalence() {
    let _g = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, h, w) = (8usize, 4usize, 12usize);
    let f = rand_feat(&mut rng, d, h, w);
    let g = rand_feat(&mut rng, d, h, w);
    let vol = build_volume(&f, &g, true).unwrap();
    let pyr = build_pyramid(&vol, 4).unwrap();
    let cfg0 = LookupConfig {
        radius: 0,
        ..LookupConfig::default()
    };

    // Integer disparities: exact volume indexing at level 0.
    for dint in [0usize, 1, 3] {
        let disp = Tensor::full(&[1, h, w], dint as f32);
        let out = lookup(&pyr, &disp, &cfg0).unwrap();
        for i in 0..h {
            for j in dint..w {
                let want = vol.data()[i * w * w + j * w + (j - dint)];
                let got = out.data()[i * w + j];
                assert_eq!(got.to_bits(), want.to_bits(), "d={dint} at ({i},{j})");
            }
        }
    }

    // Half-integer disparities: average of the two neighbors within 1e-6.
    let disp = Tensor::full(&[1, h, w], 1.5f32);
    let out = lookup(&pyr, &disp, &cfg0).unwrap();
    for i in 0..h {
        for j in 2..w {
            let a = vol.data()[i * w * w + j * w + (j - 2)];
            let b = vol.data()[i * w * w + j * w + (j - 1)];
            let got = out.data()[i * w + j];
            assert!((got - 0.5 * (a + b)).abs() < 1e-6, "({i},{j})");
        }
    }

    // Out-of-range samples are zero (level 0; j - d <= -1).
    let disp = Tensor::full(&[1, h, w], w as f32 + 5.0);
    let out = lookup(&pyr, &disp, &cfg0).unwrap();
    assert!(out.data()[0..h * w].iter().all(|v| *v == 0.0));

    // On-the-fly path matches the precomputed path on 8x16 features.
    let (d, h, w) = (16usize, 8usize, 16usize);
    let f = rand_feat(&mut rng, d, h, w);
    let g = rand_feat(&mut rng, d, h, w);
    let cfg = LookupConfig::default();
    let disp = Tensor::from_vec(
        (0..h * w).map(|_| rng.gen_range(-1.0f32..6.0)).collect(),
        &[1, h, w],
    )
    .unwrap();
    let pre = lookup(
        &build_pyramid(&build_volume(&f, &g, true).unwrap(), 4).unwrap(),
        &disp,
        &cfg,
    )
    .unwrap();
    let otf = prepare_on_the_fly(&f, &g, &cfg).unwrap().lookup(&disp).unwrap();
    let mut worst = 0.0f32;
    for (a, b) in pre.iter().zip(otf.iter()) {
        worst = worst.max((a - b).abs());
    }
    assert!(worst < 1e-4, "on-the-fly vs precomputed: {worst}");

    // Memory audit: the on-the-fly path never allocates a W^2 buffer.
    let (d, h, w) = (8usize, 4usize, 128usize);
    let f = rand_feat(&mut rng, d, h, w);
    let g = rand_feat(&mut rng, d, h, w);
    let disp = Tensor::full(&[1, h, w], 3.0f32);
    let volume_bytes = (h * w * w * 4) as u64;
    let (_, peak) = mem::measure_peak(|| {
        prepare_on_the_fly(&f, &g, &cfg).unwrap().lookup(&disp).unwrap()
    });
    assert!(
        peak < volume_bytes,
        "on-the-fly peak {peak} B vs volume {volume_bytes} B"
    );
    println!(
        "ACCEPTANCE A3 PASS — integer exact, half-integer within 1e-6, padding zero, otf within {worst:.1e}, peak {peak} B < volume {volume_bytes} B"
    );
}

/// Miniature end-to-end model for the gradient suite: one level, coarse
/// grid 8x8 (input 64x64).
fn micro_f64_model() -> (StereoModel<f64>, TrainConfig) {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            stage_widths: [4, 6, 8],
            feature_dim: 8,
            blocks_per_stage: 1,
            levels: 1,
            hidden_dim: 4,
            context_dim: 4,
            ..EncoderConfig::default()
        },
        corr_radius: 2,
        corr_enc_dim: 4,
        disp_enc_dim: 4,
        head_hidden_dim: 4,
        mask_hidden_dim: 8,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let model = StereoModel::<f64>::new(&mut rng, &cfg).unwrap();
    (model, TrainConfig::default())
}

#[test]
fn a4_gradient_suite_ops_and_end_to_end() {
    let _g = gate();
    let start = Instant::now();

    // Every differentiable primitive against central finite differences.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for check in builtin_op_checks() {
        let report = check.run(&mut rng).unwrap();
        assert!(
            report.pass(),
            "{}: {:?} (max rel err {:.2e})",
            check.name,
            report.failures.first(),
            report.max_rel_err
        );
        worst = worst.max(report.max_rel_err);
    }

    // End-to-end: 2-iteration, 1-level model on an 8x8 coarse grid under
    // the sequence loss, differentiated with respect to every parameter.
    let (model, _) = micro_f64_model();
    let (h, w) = (64usize, 64usize);
    let mut drng = ChaCha8Rng::seed_from_u64(405);
    let left = Tensor::<f64>::from_vec(
        (0..3 * h * w).map(|_| drng.gen_range(0.0..1.0)).collect(),
        &[3, h, w],
    )
    .unwrap();
    let right = Tensor::<f64>::from_vec(
        (0..3 * h * w).map(|_| drng.gen_range(0.0..1.0)).collect(),
        &[3, h, w],
    )
    .unwrap();
    let gt = Tensor::<f64>::from_vec(
        (0..h * w).map(|_| drng.gen_range(0.0..8.0)).collect(),
        &[1, h, w],
    )
    .unwrap();
    let mask = Tensor::full(&[1, h, w], 1.0f64);
    let loss_fn = || {
        let opts = RolloutOptions {
            schedule: IterationSchedule::regular(1, 2)?,
            keep_all: true,
            on_the_fly: false,
            phase: Phase::Train,
        };
        let rollout = model.forward_rollout(&left, &right, &opts)?;
        sequence_loss(&rollout.predictions, &gt, &mask, 0.9)
    };
    let params = model.trainable_params();
    let cfg = GradCheck::default();
    let report = check_params_fd(&mut rng, &params, 2, &cfg, loss_fn).unwrap();
    assert!(
        report.pass(),
        "end-to-end: {} of {} coords failed, first {:?}, max rel err {:.2e}",
        report.failures.len(),
        report.checked,
        report.failures.first(),
        report.max_rel_err
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 60 s");
    println!(
        "ACCEPTANCE A4 PASS — all ops (max rel err {worst:.1e}) + end-to-end over {} param coords (max rel err {:.1e}), {elapsed:?}",
        report.checked, report.max_rel_err
    );
}

#[test]
fn a5_convex_upsample_normalization_and_hull() {
    let _g = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w, s) = (4usize, 5usize, 8usize);
    let logits = Tensor::from_vec(
        (0..s * s * 9 * h * w).map(|_| rng.gen_range(-3.0f32..3.0)).collect(),
        &[s * s * 9, h, w],
    )
    .unwrap();

    // Weight normalization: softmax over the 9-neighbor axis sums to 1.
    let grouped = ops::reshape(&logits, &[1, 9, s * s, h, w]).unwrap();
    let weights = ops::softmax(&grouped, 1).unwrap();
    for cell in 0..s * s * h * w {
        let mut sum = 0.0f32;
        for k in 0..9 {
            sum += weights.data()[k * s * s * h * w + cell];
        }
        assert!((sum - 1.0).abs() < 1e-6, "cell {cell}: weights sum {sum}");
    }

    // Constant field upsamples to the constant s*c.
    let c = -2.25f32;
    let up = convex_upsample(&Tensor::full(&[1, h, w], c), &logits, s).unwrap();
    assert_eq!(up.shape(), &[1, h * s, w * s]);
    for v in up.iter() {
        assert!((v - c * s as f32).abs() < 1e-4);
    }

    // Hull containment for a random field.
    let coarse = Tensor::from_vec(
        (0..h * w).map(|_| rng.gen_range(-4.0f32..9.0)).collect(),
        &[1, h, w],
    )
    .unwrap();
    let up = convex_upsample(&coarse, &logits, s).unwrap();
    let sf = s as f32;
    for cy in 0..h {
        for cx in 0..w {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let ny = (cy as i32 + dy).clamp(0, h as i32 - 1) as usize;
                    let nx = (cx as i32 + dx).clamp(0, w as i32 - 1) as usize;
                    let v = coarse.data()[ny * w + nx];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            for sy in 0..s {
                for sx in 0..s {
                    let v = up.data()[(cy * s + sy) * w * s + cx * s + sx];
                    assert!(
                        v >= lo * sf - 1e-4 && v <= hi * sf + 1e-4,
                        "({cy},{cx},{sy},{sx}): {v} outside [{},{}]",
                        lo * sf,
                        hi * sf
                    );
                }
            }
        }
    }
    println!("ACCEPTANCE A5 PASS — weights sum to 1 +/- 1e-6, constant -> s*c, outputs inside the scaled 3x3 hull");
}

/// Trained artifacts shared by A6, A8, and A10. Training runs once per
/// process inside the gate; checkpoints live in a kept temp dir.
struct ToyRun {
    _dir: tempfile::TempDir,
    ckpt: PathBuf,
    train_secs: f64,
    epe: f64,
    bad3: f64,
}

fn a6_cfg() -> TrainConfig {
    TrainConfig {
        seed: 17,
        ..TrainConfig::default()
    }
}

fn a6_run() -> &'static Result<ToyRun, String> {
    static RUN: OnceLock<Result<ToyRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = a6_cfg();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = StereoModel::<f32>::new(&mut rng, &cfg.model).map_err(|e| e.to_string())?;
        eprintln!(
            "[acceptance] training toy model: {} params, {} steps — this is the long test",
            model.param_count(),
            cfg.steps
        );
        let start = Instant::now();
        let report = train(&model, &cfg, dir.path()).map_err(|e| e.to_string())?;
        let train_secs = start.elapsed().as_secs_f64();
        let val = report.final_val.ok_or("training produced no validation report")?;
        Ok(ToyRun {
            ckpt: report.checkpoint_path.clone(),
            _dir: dir,
            train_secs,
            epe: val.epe,
            bad3: val.bad_at(3.0).unwrap_or(f64::NAN),
        })
    })
}

#[test]
fn a6_toy_training_reaches_subpixel_epe() {
    let _g = gate();
    let run = a6_run().as_ref().expect("toy training failed");
    assert!(
        run.epe < 1.0,
        "validation EPE {:.3} px >= 1.0 px after toy training",
        run.epe
    );
    assert!(
        run.bad3 < 5.0,
        "bad-3 {:.2}% >= 5% after toy training",
        run.bad3
    );
    assert!(
        run.train_secs < 3900.0,
        "training took {:.0} s, beyond the ~1 hour budget",
        run.train_secs
    );
    println!(
        "ACCEPTANCE A6 PASS — 2000 steps in {:.0} s: val EPE {:.3} px < 1.0, bad-3 {:.2}% < 5%",
        run.train_secs, run.epe, run.bad3
    );
}

#[test]
fn a7_slow_fast_flop_contracts() {
    let _g = gate();
    // Paper-scale channel widths (the ratio depends on them); small image.
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = StereoModel::<f32>::new(&mut rng, &cfg).unwrap();
    let (h, w) = (64usize, 128usize);
    let mk = |rng: &mut ChaCha8Rng| {
        Tensor::from_vec(
            (0..3 * h * w).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
            &[3, h, w],
        )
        .unwrap()
    };
    let pair = ImagePair::new(mk(&mut rng), mk(&mut rng)).unwrap();
    let run = |schedule: IterationSchedule| {
        let opts = RolloutOptions {
            schedule,
            keep_all: false,
            on_the_fly: false,
            phase: Phase::Eval,
        };
        model.run_inference(&pair, &opts, false).unwrap()
    };

    let (_, _, regular) = run(IterationSchedule::regular(3, 32).unwrap());
    let ratio = regular.macs_per_update(0) / regular.macs_per_update(1);
    assert!(
        (3.5..=4.5).contains(&ratio),
        "finest:middle per-update MAC ratio {ratio:.2} outside [3.5, 4.5]"
    );

    let (_, _, slowfast) = run(IterationSchedule::slow_fast(&[10, 20, 30]).unwrap());
    assert_eq!(slowfast.gru_updates, vec![10, 20, 30]);
    let frac = slowfast.total_gru_macs() as f64 / regular.total_gru_macs() as f64;
    assert!(
        frac < 0.5,
        "slow-fast GRU MACs are {:.1}% of regular, expected < 50%",
        frac * 100.0
    );

    // Degenerate schedule (k,k,k) interleaved 1:1:1 reproduces the regular
    // rollout bitwise.
    let (a, _, _) = run(IterationSchedule::regular(3, 5).unwrap());
    let (b, _, _) = run(IterationSchedule::slow_fast(&[5, 5, 5]).unwrap());
    assert_eq!(
        a.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    println!(
        "ACCEPTANCE A7 PASS — per-update ratio {ratio:.2} in [3.5, 4.5]; slow-fast at {:.1}% of regular GRU MACs; (5,5,5) bitwise == regular",
        frac * 100.0
    );
}

#[test]
fn a8_iteration_monotonicity_and_flat_memory() {
    let _g = gate();
    let run = a6_run().as_ref().expect("toy training failed");
    let (model, _) = load_model(&run.ckpt).expect("reload trained checkpoint");
    let cfg = a6_cfg();
    let val_set = make_validation_set(&cfg.synth, cfg.augment.crop, cfg.val_samples, cfg.seed)
        .unwrap();

    let epe8 = median_epe_per_sample(&model, &val_set, 8).unwrap();
    let epe32 = median_epe_per_sample(&model, &val_set, 32).unwrap();
    assert!(
        epe32 <= epe8,
        "median EPE at 32 iterations ({epe32:.4}) exceeds 8 iterations ({epe8:.4})"
    );

    // Peak tensor memory during inference must not grow with N.
    let sample = &val_set[0];
    let peak_for = |iters: usize| -> u64 {
        let opts = RolloutOptions::inference(iters, model.cfg.encoder.levels).unwrap();
        let (_, peak) =
            mem::measure_peak(|| model.run_inference(&sample.pair, &opts, false).unwrap());
        peak
    };
    // Warm-up run so one-time allocations do not skew the comparison.
    peak_for(2);
    let p8 = peak_for(8) as f64;
    let p32 = peak_for(32) as f64;
    let rel = (p32 - p8).abs() / p8.max(p32);
    assert!(
        rel <= 0.05,
        "inference memory high-water differs by {:.1}% between N=8 ({p8} B) and N=32 ({p32} B)",
        rel * 100.0
    );
    println!(
        "ACCEPTANCE A8 PASS — median EPE {epe32:.3} @32 <= {epe8:.3} @8; peak memory {p8} B vs {p32} B ({:.2}% apart)",
        rel * 100.0
    );
}

#[test]
fn a9_io_round_trips_bit_exact() {
    let _g = gate();
    // PFM round trip.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let field = Tensor::from_vec(
        (0..24 * 31).map(|_| rng.gen_range(-40.0f32..40.0)).collect(),
        &[24, 31],
    )
    .unwrap();
    let mut buf = Vec::new();
    write_pfm_to(&mut buf, &field).unwrap();
    let (back, _) = read_pfm_from(buf.as_slice(), "mem").unwrap();
    assert!(field
        .iter()
        .zip(back.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits()));

    // Checkpoint round trip, then inference equality, bitwise.
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            stage_widths: [8, 12, 16],
            feature_dim: 16,
            blocks_per_stage: 1,
            hidden_dim: 8,
            context_dim: 8,
            ..EncoderConfig::default()
        },
        corr_radius: 3,
        corr_enc_dim: 8,
        disp_enc_dim: 8,
        head_hidden_dim: 8,
        mask_hidden_dim: 16,
        ..ModelConfig::default()
    };
    let mut mrng = ChaCha8Rng::seed_from_u64(90);
    let model = StereoModel::<f32>::new(&mut mrng, &cfg).unwrap();
    let mk = |rng: &mut ChaCha8Rng| {
        Tensor::from_vec(
            (0..3 * 48 * 64).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
            &[3, 48, 64],
        )
        .unwrap()
    };
    let pair = ImagePair::new(mk(&mut rng), mk(&mut rng)).unwrap();
    let opts = RolloutOptions::inference(4, cfg.encoder.levels).unwrap();
    let (before, _, _) = model.run_inference(&pair, &opts, false).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::from_model(&model, 90).save(&path).unwrap();
    let (restored, _) = load_model(&path).unwrap();
    let (after, _, _) = restored.run_inference(&pair, &opts, false).unwrap();
    assert_eq!(
        before.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        after.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    println!("ACCEPTANCE A9 PASS — PFM and checkpoint round trips bit-exact; save -> load -> infer bitwise identical");
}

/// Ablation models for A10, trained with the A6 protocol at a reduced
/// step budget (identical budgets across the compared variants).
struct AblationRun {
    _dir: tempfile::TempDir,
    epe_3l: f64,
    epe_1l: f64,
    epe_shared: f64,
    params_sep: usize,
    params_shared: usize,
}

fn ablation_runs() -> &'static Result<AblationRun, String> {
    static RUN: OnceLock<Result<AblationRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let steps = 500;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let base = TrainConfig {
            steps,
            val_every: steps,
            checkpoint_every: 0,
            ..a6_cfg()
        };
        let val_set = make_validation_set(&base.synth, base.augment.crop, base.val_samples, base.seed)
            .map_err(|e| e.to_string())?;

        let train_variant = |name: &str,
                                 edit: &dyn Fn(&mut ModelConfig)|
         -> Result<(f64, usize), String> {
            let mut cfg = base.clone();
            edit(&mut cfg.model);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = StereoModel::<f32>::new(&mut rng, &cfg.model).map_err(|e| e.to_string())?;
            let params = model.param_count();
            eprintln!("[acceptance] ablation {name}: {params} params, {steps} steps");
            train(&model, &cfg, &dir.path().join(name)).map_err(|e| e.to_string())?;
            let report = evaluate_on_samples(&model, &val_set, base.val_iters, false)
                .map_err(|e| e.to_string())?;
            eprintln!("[acceptance] ablation {name}: EPE {:.3}", report.epe);
            Ok((report.epe, params))
        };

        let (epe_3l, params_sep) = train_variant("levels3", &|_| {})?;
        let (epe_1l, _) = train_variant("levels1", &|m| m.encoder.levels = 1)?;
        let (epe_shared, params_shared) =
            train_variant("shared", &|m| m.encoder.shared_backbone = true)?;
        Ok(AblationRun {
            _dir: dir,
            epe_3l,
            epe_1l,
            epe_shared,
            params_sep,
            params_shared,
        })
    })
}

#[test]
fn a10_ablation_direction_checks() {
    let _g = gate();
    let run = ablation_runs().as_ref().expect("ablation training failed");
    // 3-level at least matches 1-level (within 5% slack).
    assert!(
        run.epe_3l <= run.epe_1l * 1.05,
        "3-level EPE {:.3} more than 5% worse than 1-level {:.3}",
        run.epe_3l,
        run.epe_1l
    );
    // Shared backbone within 10% of separate, with strictly fewer params.
    assert!(
        run.epe_shared <= run.epe_3l * 1.10,
        "shared-backbone EPE {:.3} more than 10% worse than separate {:.3}",
        run.epe_shared,
        run.epe_3l
    );
    assert!(
        run.params_shared < run.params_sep,
        "shared backbone should have fewer params ({} vs {})",
        run.params_shared,
        run.params_sep
    );
    println!(
        "ACCEPTANCE A10 PASS — EPE 3L {:.3} vs 1L {:.3}; shared {:.3} (params {} < {})",
        run.epe_3l, run.epe_1l, run.epe_shared, run.params_shared, run.params_sep
    );
}

// Property-style invariants that complement the numbered criteria.

#[test]
fn invariant_lookup_is_piecewise_linear_in_disparity() {
    let _g = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, h, w) = (6usize, 3usize, 10usize);
    let f = rand_feat(&mut rng, d, h, w);
    let g = rand_feat(&mut rng, d, h, w);
    let pyr = build_pyramid(&build_volume(&f, &g, true).unwrap(), 4).unwrap();
    let cfg = LookupConfig {
        radius: 1,
        ..LookupConfig::default()
    };
    // Level-0 outputs at fractional disparity are the convex combination
    // of the two integer-disparity lookups.
    for t in [0.25f32, 0.5, 0.75] {
        let d0 = lookup(&pyr, &Tensor::full(&[1, h, w], 2.0), &cfg).unwrap();
        let d1 = lookup(&pyr, &Tensor::full(&[1, h, w], 3.0), &cfg).unwrap();
        let dt = lookup(&pyr, &Tensor::full(&[1, h, w], 2.0 + t), &cfg).unwrap();
        // Level 0 channels are the first 2r+1.
        for c in 0..3 {
            for i in 0..h * w {
                let idx = c * h * w + i;
                let want = d0.data()[idx] * (1.0 - t) + d1.data()[idx] * t;
                assert!(
                    (dt.data()[idx] - want).abs() < 1e-5,
                    "channel {c} pixel {i} t {t}"
                );
            }
        }
    }
    println!("invariant: lookup piecewise-linear in d — PASS");
}

#[test]
fn invariant_backward_replay_is_deterministic() {
    let _g = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::<f32>::from_vec(
        (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        &[4, 16],
    )
    .unwrap()
    .requires_grad();
    let build = |x: &Tensor<f32>| {
        let s = ops::softmax(x, 1).unwrap();
        let t = ops::tanh(&ops::matmul(&s, &ops::reshape(&s, &[16, 4]).unwrap()).unwrap());
        ops::sum(&t)
    };
    let loss = build(&x);
    let tape = stereomatch::tensor::autograd::Tape::for_root(&loss).unwrap();
    tape.replay().unwrap();
    let g1 = x.grad().unwrap();
    x.zero_grad();
    loss.zero_grad();
    // A second replay after reset must be bit-identical (intermediate
    // nodes keep their adjoints zeroed by a fresh traversal).
    let loss2 = build(&x);
    let tape2 = stereomatch::tensor::autograd::Tape::for_root(&loss2).unwrap();
    tape2.replay().unwrap();
    let g2 = x.grad().unwrap();
    assert_eq!(
        g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    println!("invariant: backward replay deterministic — PASS");
}

#[test]
fn no_grad_inference_records_nothing() {
    let _g = gate();
    let x = Tensor::<f32>::from_vec(vec![0.5, -0.25], &[2]).unwrap().requires_grad();
    let y = no_grad(|| ops::relu(&x));
    assert!(!y.is_requires_grad());
    println!("invariant: no-grad inference records nothing — PASS");
}
