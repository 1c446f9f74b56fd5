//! Toy-scale training: synthetic data stream, sequence loss, AdamW with a
//! one-cycle schedule and gradient clipping, periodic validation and
//! checkpointing, and a line-delimited metric log.

pub mod augment;
pub mod loss;
pub mod lr;
pub mod optim;
pub mod synth;

pub use augment::{augment, AugmentationConfig};
pub use loss::{sequence_loss, sequence_weights, LossConfig};
pub use lr::{one_cycle_lr, OneCycleConfig};
pub use optim::{clip_grad_norm, zero_grad, AdamW, AdamWConfig};
pub use synth::{generate_synthetic, generate_with_mode, SynthConfig, SynthMode, SyntheticSample};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::checkpoint::{Checkpoint, OptimizerState};
use crate::metrics::{compute_metrics, MetricsReport, DEFAULT_THRESHOLDS};
use crate::model::{ModelConfig, RolloutOptions, StereoModel};
use crate::nn::Phase;
use crate::tensor::{Scalar, Tensor};
use crate::update::IterationSchedule;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub lr: OneCycleConfig,
    pub optimizer: AdamWConfig,
    pub clip_grad_norm: f64,
    pub synth: SynthConfig,
    pub augment: AugmentationConfig,
    /// Sample correlations on the fly instead of materializing volumes.
    pub on_the_fly_corr: bool,
    pub val_every: usize,
    pub val_samples: usize,
    pub val_iters: usize,
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 17,
            steps: 2000,
            batch_size: 2,
            loss: LossConfig {
                gamma: 0.9,
                train_iters: 12,
            },
            lr: OneCycleConfig::default(),
            optimizer: AdamWConfig::default(),
            clip_grad_norm: 1.0,
            synth: SynthConfig::default(),
            augment: AugmentationConfig {
                // Ablation-style augmentation: vertical perturbation and
                // random crops only; photometric/stretch stay available
                // through the config file.
                enabled: true,
                saturation_range: (1.0, 1.0),
                stretch_log2_range: (0.0, 0.0),
                vertical_perturb: 0.5,
                crop: (64, 128),
            },
            on_the_fly_corr: false,
            val_every: 500,
            val_samples: 50,
            val_iters: 32,
            checkpoint_every: 500,
            model: ModelConfig::toy(),
        }
    }
}

/// Result summary of a training run.
#[derive(Debug)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_loss: f64,
    pub final_val: Option<MetricsReport>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Stack per-sample tensors into one batch tensor along a new axis.
fn stack<T: Scalar>(tensors: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shape = tensors[0].shape().to_vec();
    let mut data = Vec::with_capacity(tensors.len() * tensors[0].len());
    for t in tensors {
        if t.shape() != shape {
            return Err(Error::shape("stack", &shape, t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    let mut out_shape = vec![tensors.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::from_vec(data, &out_shape)
}

/// Deterministic held-out set: the generation stream is salted so it never
/// overlaps the training stream.
pub fn make_validation_set(
    synth: &SynthConfig,
    crop: (usize, usize),
    count: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let cfg = SynthConfig {
        height: crop.0,
        width: crop.1,
        ..synth.clone()
    };
    (0..count).map(|_| generate_synthetic(&mut rng, &cfg)).collect()
}

/// Pooled evaluation metrics of a model over a sample set.
pub fn evaluate_on_samples(
    model: &StereoModel<f32>,
    samples: &[SyntheticSample<f32>],
    iters: usize,
    on_the_fly: bool,
) -> Result<MetricsReport> {
    let levels = model.cfg.encoder.levels;
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        let mut opts = RolloutOptions::inference(iters, levels)?;
        opts.on_the_fly = on_the_fly;
        let (field, _, _) = model.run_inference(&s.pair, &opts, false)?;
        preds.push(field.values);
        gts.push(s.disparity.clone());
        masks.push(s.mask.clone());
    }
    let pred = stack(&preds.iter().collect::<Vec<_>>())?;
    let gt = stack(&gts.iter().collect::<Vec<_>>())?;
    let mask = stack(&masks.iter().collect::<Vec<_>>())?;
    compute_metrics(&pred, &gt, Some(&mask), &DEFAULT_THRESHOLDS)
}

/// Median of per-sample end-point errors (used by iteration sweeps).
pub fn median_epe_per_sample(
    model: &StereoModel<f32>,
    samples: &[SyntheticSample<f32>],
    iters: usize,
) -> Result<f64> {
    let levels = model.cfg.encoder.levels;
    let mut epes = Vec::with_capacity(samples.len());
    for s in samples {
        let opts = RolloutOptions::inference(iters, levels)?;
        let (field, _, _) = model.run_inference(&s.pair, &opts, false)?;
        let r = compute_metrics(&field.values, &s.disparity, Some(&s.mask), &[1.0])?;
        epes.push(r.epe);
    }
    epes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = epes.len();
    Ok(if n % 2 == 1 {
        epes[n / 2]
    } else {
        0.5 * (epes[n / 2 - 1] + epes[n / 2])
    })
}

fn draw_batch(
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let mut lefts = Vec::new();
    let mut rights = Vec::new();
    let mut gts = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..cfg.batch_size {
        let raw = generate_synthetic::<f32>(rng, &cfg.synth)?;
        let s = if cfg.augment.enabled {
            augment(&raw, &cfg.augment, rng)?
        } else {
            raw
        };
        lefts.push(s.pair.left);
        rights.push(s.pair.right);
        gts.push(s.disparity);
        masks.push(s.mask);
    }
    Ok((
        stack(&lefts.iter().collect::<Vec<_>>())?,
        stack(&rights.iter().collect::<Vec<_>>())?,
        stack(&gts.iter().collect::<Vec<_>>())?,
        stack(&masks.iter().collect::<Vec<_>>())?,
    ))
}

fn crop_of(cfg: &TrainConfig) -> (usize, usize) {
    if cfg.augment.enabled {
        cfg.augment.crop
    } else {
        (cfg.synth.height, cfg.synth.width)
    }
}

/// Run the training loop, writing `train_log.jsonl` and `model.ckpt`
/// (atomically, write-then-rename) under `out_dir`.
pub fn train(model: &StereoModel<f32>, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::contract("train", "steps and batch_size must be positive"));
    }
    let crop = crop_of(cfg);
    if crop.0 % crate::encoders::PAD_MULTIPLE != 0 || crop.1 % crate::encoders::PAD_MULTIPLE != 0 {
        return Err(Error::contract(
            "train",
            format!(
                "training extents {}x{} must divide {}",
                crop.0,
                crop.1,
                crate::encoders::PAD_MULTIPLE
            ),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.jsonl");
    let ckpt_path = out_dir.join("model.ckpt");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);

    let params = model.trainable_params();
    let mut opt = AdamW::new(&params, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_set = make_validation_set(&cfg.synth, crop_of(cfg), cfg.val_samples, cfg.seed)?;
    let levels = model.cfg.encoder.levels;

    let save_ckpt = |opt: &AdamW<f32>| -> Result<()> {
        let (m, v) = opt.moments();
        let names: Vec<String> = model
            .named_params()
            .into_iter()
            .filter(|(_, p)| p.trainable())
            .map(|(n, _)| n)
            .collect();
        let state = OptimizerState {
            step_count: opt.step_count(),
            moments: names
                .into_iter()
                .zip(m.iter().zip(v))
                .map(|(n, (m, v))| (n, m.clone(), v.clone()))
                .collect(),
        };
        Checkpoint::from_model(model, cfg.seed)
            .with_optimizer(state)
            .save(&ckpt_path)
    };

    let mut final_loss = f64::NAN;
    let mut final_val = None;
    let start = std::time::Instant::now();
    for step in 0..cfg.steps {
        let (left, right, gt, mask) = draw_batch(&mut rng, cfg)?;
        let opts = RolloutOptions {
            schedule: IterationSchedule::regular(levels, cfg.loss.train_iters)?,
            keep_all: true,
            on_the_fly: cfg.on_the_fly_corr,
            phase: Phase::Train,
        };
        let rollout = model.forward_rollout(&left, &right, &opts)?;
        let loss = sequence_loss(&rollout.predictions, &gt, &mask, cfg.loss.gamma)?;
        let loss_val = loss.item() as f64;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {step} (lr schedule position {}/{})",
                step, cfg.steps
            )));
        }
        crate::tensor::autograd::backward(&loss)?;
        let grad_norm = clip_grad_norm(&params, cfg.clip_grad_norm);
        let lr = one_cycle_lr(step, cfg.steps, &cfg.lr)?;
        opt.step(&params, lr)?;
        zero_grad(&params);
        final_loss = loss_val;

        let do_val = cfg.val_every > 0
            && ((step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps)
            && !val_set.is_empty();
        let val = if do_val {
            let report =
                evaluate_on_samples(model, &val_set, cfg.val_iters, cfg.on_the_fly_corr)?;
            let epe = report.epe;
            final_val = Some(report);
            Some(epe)
        } else {
            None
        };
        let record = serde_json::json!({
            "step": step,
            "lr": lr,
            "loss": loss_val,
            "grad_norm": grad_norm,
            "val_epe": val,
        });
        writeln!(log, "{record}")?;
        if step % 50 == 0 || step + 1 == cfg.steps {
            eprintln!(
                "step {step:>5}/{} loss {loss_val:.4} lr {lr:.2e} {}{:.1}s",
                cfg.steps,
                val.map(|v| format!("val_epe {v:.3} ")).unwrap_or_default(),
                start.elapsed().as_secs_f64()
            );
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            save_ckpt(&opt)?;
        }
    }
    save_ckpt(&opt)?;
    log.flush()?;
    Ok(TrainReport {
        steps_run: cfg.steps,
        final_loss,
        final_val,
        checkpoint_path: ckpt_path,
        log_path,
    })
}

/// One optimization step on a fixed batch; returns (loss before, loss
/// after) on that same batch. Descent sanity helper used by tests.
pub fn descent_probe(model: &StereoModel<f32>, cfg: &TrainConfig, lr: f64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (left, right, gt, mask) = draw_batch(&mut rng, cfg)?;
    let params = model.trainable_params();
    let mut opt = AdamW::new(
        &params,
        AdamWConfig {
            weight_decay: 0.0,
            ..cfg.optimizer
        },
    );
    let loss_on_batch = |phase: Phase| -> Result<f64> {
        let opts = RolloutOptions {
            schedule: IterationSchedule::regular(model.cfg.encoder.levels, cfg.loss.train_iters)?,
            keep_all: true,
            on_the_fly: false,
            phase,
        };
        let rollout = model.forward_rollout(&left, &right, &opts)?;
        let loss = sequence_loss(&rollout.predictions, &gt, &mask, cfg.loss.gamma)?;
        Ok(loss.item() as f64)
    };
    // Forward + backward + one step.
    let opts = RolloutOptions {
        schedule: IterationSchedule::regular(model.cfg.encoder.levels, cfg.loss.train_iters)?,
        keep_all: true,
        on_the_fly: false,
        phase: Phase::Train,
    };
    let rollout = model.forward_rollout(&left, &right, &opts)?;
    let loss = sequence_loss(&rollout.predictions, &gt, &mask, cfg.loss.gamma)?;
    let before = loss.item() as f64;
    crate::tensor::autograd::backward(&loss)?;
    opt.step(&params, lr)?;
    zero_grad(&params);
    drop(rollout);
    let after = loss_on_batch(Phase::Train)?;
    Ok((before, after))
}

/// Quick loss of one evaluation pass (used in tests).
pub fn eval_loss_on_seeded_batch(model: &StereoModel<f32>, cfg: &TrainConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (left, right, gt, mask) = draw_batch(&mut rng, cfg)?;
    let opts = RolloutOptions {
        schedule: IterationSchedule::regular(model.cfg.encoder.levels, cfg.loss.train_iters)?,
        keep_all: true,
        on_the_fly: false,
        phase: Phase::Eval,
    };
    let rollout = crate::tensor::no_grad(|| model.forward_rollout(&left, &right, &opts))?;
    let loss = sequence_loss(&rollout.predictions, &gt, &mask, cfg.loss.gamma)?;
    Ok(loss.item() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_train_cfg() -> TrainConfig {
        TrainConfig {
            seed: 5,
            steps: 3,
            batch_size: 1,
            loss: LossConfig {
                gamma: 0.9,
                train_iters: 2,
            },
            synth: SynthConfig {
                height: 64,
                width: 96,
                max_disp: 8.0,
                modes: vec![SynthMode::Constant],
            },
            augment: AugmentationConfig {
                enabled: false,
                ..AugmentationConfig::default()
            },
            val_every: 3,
            val_samples: 2,
            val_iters: 2,
            checkpoint_every: 0,
            model: micro_model_cfg(),
            ..TrainConfig::default()
        }
    }

    fn micro_model_cfg() -> ModelConfig {
        use crate::encoders::EncoderConfig;
        ModelConfig {
            encoder: EncoderConfig {
                stage_widths: [4, 6, 8],
                feature_dim: 8,
                blocks_per_stage: 1,
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
        }
    }

    #[test]
    fn one_step_descends_on_fixed_batch() {
        let cfg = micro_train_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let model = StereoModel::new(&mut rng, &cfg.model).unwrap();
        let (before, after) = descent_probe(&model, &cfg, 1e-3).unwrap();
        assert!(
            after < before,
            "loss should decrease on the training batch: {before} -> {after}"
        );
    }

    #[test]
    fn short_run_writes_log_and_checkpoint() {
        let cfg = micro_train_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let model = StereoModel::new(&mut rng, &cfg.model).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = train(&model, &cfg, dir.path()).unwrap();
        assert_eq!(report.steps_run, 3);
        assert!(report.checkpoint_path.exists());
        let log = std::fs::read_to_string(&report.log_path).unwrap();
        assert_eq!(log.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert!(first["loss"].as_f64().unwrap().is_finite());
        assert!(first["lr"].as_f64().unwrap() > 0.0);
        assert!(report.final_val.is_some());
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let cfg = micro_train_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let model = StereoModel::new(&mut rng, &cfg.model).unwrap();
        // Poison one weight; the loss goes NaN the very first step.
        let params = model.trainable_params();
        let victim = &params[0];
        let t = victim.get();
        let mut data = t.data().to_vec();
        data[0] = f32::NAN;
        victim.set(Tensor::from_vec(data, &t.shape().to_vec()).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let err = train(&model, &cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert!(err.to_string().contains("step 0"), "{err}");
    }

    #[test]
    fn fixed_seed_reproduces_loss_curve() {
        let cfg = micro_train_cfg();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let m1 = StereoModel::new(&mut rng, &cfg.model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let m2 = StereoModel::new(&mut rng, &cfg.model).unwrap();
        train(&m1, &cfg, dir1.path()).unwrap();
        train(&m2, &cfg, dir2.path()).unwrap();
        let l1 = std::fs::read_to_string(dir1.path().join("train_log.jsonl")).unwrap();
        let l2 = std::fs::read_to_string(dir2.path().join("train_log.jsonl")).unwrap();
        assert_eq!(l1, l2);
    }
}
