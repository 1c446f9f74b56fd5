//! The full stereo model: encoders, correlation source, and the recurrent
//! update operator, wired into training and inference rollouts.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit::flops;
use crate::correlation::{
    build_pyramid, build_volume, lookup, prepare_on_the_fly, CorrelationPyramid, LookupConfig,
    OnTheFlyCorr,
};
use crate::encoders::{pad_input, EncoderConfig, Encoders, ImagePair};
use crate::error::{Error, Result};
use crate::nn::Phase;
use crate::tensor::{no_grad, ops, Param, ParamVisitor, Scalar, Tensor};
use crate::update::{
    convex_upsample, IterationSchedule, MultiLevelState, RolloutStats, UpdateConfig,
    UpdateOperator,
};

/// Complete architecture configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub corr_radius: usize,
    pub corr_levels: usize,
    pub corr_normalize: bool,
    pub corr_enc_dim: usize,
    pub disp_enc_dim: usize,
    pub head_hidden_dim: usize,
    pub mask_hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            corr_radius: 4,
            corr_levels: 4,
            corr_normalize: true,
            corr_enc_dim: 96,
            disp_enc_dim: 64,
            head_hidden_dim: 128,
            mask_hidden_dim: 256,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the toy training runs.
    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                stage_widths: [32, 48, 64],
                feature_dim: 64,
                blocks_per_stage: 1,
                hidden_dim: 32,
                context_dim: 32,
                ..EncoderConfig::default()
            },
            corr_enc_dim: 48,
            disp_enc_dim: 32,
            head_hidden_dim: 32,
            mask_hidden_dim: 64,
            ..ModelConfig::default()
        }
    }

    pub fn lookup_config(&self) -> LookupConfig {
        LookupConfig {
            radius: self.corr_radius,
            levels: self.corr_levels,
            normalize: self.corr_normalize,
        }
    }

    fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            levels: self.encoder.levels,
            hidden_dim: self.encoder.hidden_dim,
            context_dim: self.encoder.context_dim,
            corr_channels: self.lookup_config().output_channels(),
            corr_enc_dim: self.corr_enc_dim,
            disp_enc_dim: self.disp_enc_dim,
            head_hidden_dim: self.head_hidden_dim,
            mask_hidden_dim: self.mask_hidden_dim,
            upsample_factor: self.encoder.downsample,
        }
    }
}

/// Resolution tag of a [`DisparityField`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldResolution {
    /// Feature-grid resolution; values measure coarse pixels.
    Coarse { factor: usize },
    /// Input resolution; values measure input pixels.
    Full,
}

/// A per-pixel horizontal displacement map plus its resolution tag.
pub struct DisparityField<T: Scalar> {
    pub values: Tensor<T>,
    pub resolution: FieldResolution,
}

/// How a rollout should run.
pub struct RolloutOptions {
    pub schedule: IterationSchedule,
    /// Keep every upsampled intermediate prediction (training needs them).
    pub keep_all: bool,
    /// Sample correlations on the fly instead of materializing the volume.
    pub on_the_fly: bool,
    pub phase: Phase,
}

impl RolloutOptions {
    pub fn inference(iters: usize, levels: usize) -> Result<Self> {
        Ok(RolloutOptions {
            schedule: IterationSchedule::regular(levels, iters)?,
            keep_all: false,
            on_the_fly: false,
            phase: Phase::Eval,
        })
    }
}

/// Everything produced by one rollout.
pub struct Rollout<T: Scalar> {
    /// Full-resolution (padded-extent) disparity after the last update.
    pub final_full: Tensor<T>,
    /// Coarse-grid disparity after the last update.
    pub final_coarse: Tensor<T>,
    /// Upsampled prediction after each finest-level update, when kept.
    pub predictions: Vec<Tensor<T>>,
    pub stats: RolloutStats,
}

enum CorrSource<T: Scalar> {
    Precomputed(CorrelationPyramid<T>),
    OnTheFly(OnTheFlyCorr<T>),
}

impl<T: Scalar> CorrSource<T> {
    fn lookup(&self, d: &Tensor<T>, cfg: &LookupConfig) -> Result<Tensor<T>> {
        match self {
            CorrSource::Precomputed(pyr) => lookup(pyr, d, cfg),
            CorrSource::OnTheFly(otf) => otf.lookup(d),
        }
    }
}

/// The composed stereo network.
pub struct StereoModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub encoders: Encoders<T>,
    pub update: UpdateOperator<T>,
}

impl<T: Scalar> StereoModel<T> {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let encoders = Encoders::new(rng, &cfg.encoder)?;
        let update = UpdateOperator::new(rng, &cfg.update_config())?;
        Ok(StereoModel {
            cfg: cfg.clone(),
            encoders,
            update,
        })
    }

    pub fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        self.encoders.visit_params("encoders", f);
        self.update.visit_params("update", f);
    }

    pub fn named_params(&self) -> Vec<(String, Param<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| out.push((name.to_string(), p.clone())));
        out
    }

    /// Trainable parameters only.
    pub fn trainable_params(&self) -> Vec<Param<T>> {
        self.named_params()
            .into_iter()
            .filter(|(_, p)| p.trainable())
            .map(|(_, p)| p)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        crate::nn::param_count(|f| self.visit_params(f))
    }

    /// Run the recurrent refinement over already-padded (possibly batched)
    /// image tensors. The disparity starts at zero on the coarse grid and
    /// each finest-level update refines it.
    pub fn forward_rollout(
        &self,
        left: &Tensor<T>,
        right: &Tensor<T>,
        opts: &RolloutOptions,
    ) -> Result<Rollout<T>> {
        let levels = self.cfg.encoder.levels;
        if opts.schedule.steps.is_empty() {
            return Err(Error::contract("rollout", "empty schedule"));
        }
        if opts.schedule.steps[0].len() != levels {
            return Err(Error::contract(
                "rollout",
                format!(
                    "schedule width {} does not match {levels}-level model",
                    opts.schedule.steps[0].len()
                ),
            ));
        }
        let mut stats = RolloutStats::new(levels);

        let (encoded, enc_macs) =
            flops::measure(|| self.encoders.encode(left, right, opts.phase));
        stats.encoder_macs = enc_macs;
        let (fl, fr, bundle) = encoded?;

        let lookup_cfg = self.cfg.lookup_config();
        let (source, vol_macs) = flops::measure(|| -> Result<CorrSource<T>> {
            if opts.on_the_fly {
                Ok(CorrSource::OnTheFly(prepare_on_the_fly(
                    &fl,
                    &fr,
                    &lookup_cfg,
                )?))
            } else {
                let vol = build_volume(&fl, &fr, lookup_cfg.normalize)?;
                Ok(CorrSource::Precomputed(build_pyramid(
                    &vol,
                    lookup_cfg.levels,
                )?))
            }
        });
        let source = source?;
        stats.volume_macs = vol_macs;

        // Initial coarse disparity: zero everywhere.
        let feat_shape = fl.shape();
        let rank = feat_shape.len();
        let (h, w) = (feat_shape[rank - 2], feat_shape[rank - 1]);
        let batched = rank == 4;
        let d0_shape = if batched {
            vec![feat_shape[0], 1, h, w]
        } else {
            vec![1, h, w]
        };
        let mut disp = Tensor::zeros(&d0_shape);

        let mut state = MultiLevelState {
            hidden: bundle.hidden,
            context: bundle.context,
        };

        let last_emit = opts
            .schedule
            .steps
            .iter()
            .rposition(|s| s[0])
            .ok_or_else(|| Error::contract("rollout", "schedule never updates finest level"))?;

        let s_factor = self.cfg.encoder.downsample;
        let mut predictions = Vec::new();
        let mut final_full: Option<Tensor<T>> = None;
        for (t, include) in opts.schedule.steps.iter().enumerate() {
            let corr = if include[0] {
                let (c, macs) = flops::measure(|| source.lookup(&disp, &lookup_cfg));
                stats.lookup_macs += macs;
                Some(c?)
            } else {
                None
            };
            let out = self
                .update
                .step(&mut state, corr.as_ref(), &disp, include, &mut stats)?;
            if let Some(step_out) = out {
                disp = ops::add(&disp, &step_out.delta)?;
                if opts.keep_all || t == last_emit {
                    let full = convex_upsample(&disp, &step_out.mask_logits, s_factor)?;
                    if opts.keep_all {
                        predictions.push(full.clone());
                    }
                    if t == last_emit {
                        final_full = Some(full);
                    }
                }
            }
        }
        Ok(Rollout {
            final_full: final_full.expect("schedule ends with a finest update"),
            final_coarse: disp,
            predictions,
            stats,
        })
    }

    /// Pad a pair, run an inference rollout without gradient recording,
    /// and crop the result back to the input extents.
    pub fn run_inference(
        &self,
        pair: &ImagePair<T>,
        opts: &RolloutOptions,
        keep_sequence: bool,
    ) -> Result<(DisparityField<T>, Option<Vec<Tensor<T>>>, RolloutStats)> {
        let (padded, crop) = pad_input(pair);
        let opts = RolloutOptions {
            schedule: opts.schedule.clone(),
            keep_all: keep_sequence,
            on_the_fly: opts.on_the_fly,
            phase: Phase::Eval,
        };
        let rollout = no_grad(|| self.forward_rollout(&padded.left, &padded.right, &opts))?;
        let values = crop.crop(&rollout.final_full)?;
        let sequence = if keep_sequence {
            Some(
                rollout
                    .predictions
                    .iter()
                    .map(|p| crop.crop(p))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok((
            DisparityField {
                values,
                resolution: FieldResolution::Full,
            },
            sequence,
            rollout.stats,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
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
        }
    }

    fn rand_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImagePair<f32> {
        use rand::Rng;
        let gen = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(
                (0..3 * h * w).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
                &[3, h, w],
            )
            .unwrap()
        };
        ImagePair::new(gen(rng), gen(rng)).unwrap()
    }

    #[test]
    fn inference_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let model = StereoModel::<f32>::new(&mut rng, &tiny_cfg()).unwrap();
        let pair = rand_pair(&mut rng, 50, 70);
        let opts = RolloutOptions::inference(4, 3).unwrap();
        let (field, seq, _) = model.run_inference(&pair, &opts, true).unwrap();
        assert_eq!(field.values.shape(), &[1, 50, 70]);
        assert_eq!(seq.as_ref().unwrap().len(), 4);
        let (field2, _, _) = model.run_inference(&pair, &opts, false).unwrap();
        assert_eq!(
            field.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            field2.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_iteration_schedule_is_rejected() {
        assert!(RolloutOptions::inference(0, 3).is_err());
    }

    #[test]
    fn three_level_model_has_more_params_than_one_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg3 = tiny_cfg();
        let mut cfg1 = tiny_cfg();
        cfg1.encoder.levels = 1;
        let m3 = StereoModel::<f32>::new(&mut rng, &cfg3).unwrap();
        let m1 = StereoModel::<f32>::new(&mut rng, &cfg1).unwrap();
        assert!(m3.param_count() > m1.param_count());
    }

    #[test]
    fn slow_fast_equal_counts_reproduces_regular_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let model = StereoModel::<f32>::new(&mut rng, &tiny_cfg()).unwrap();
        let pair = rand_pair(&mut rng, 32, 64);
        let regular = RolloutOptions {
            schedule: IterationSchedule::regular(3, 5).unwrap(),
            keep_all: false,
            on_the_fly: false,
            phase: Phase::Eval,
        };
        let slowfast = RolloutOptions {
            schedule: IterationSchedule::slow_fast(&[5, 5, 5]).unwrap(),
            keep_all: false,
            on_the_fly: false,
            phase: Phase::Eval,
        };
        let (a, _, _) = model.run_inference(&pair, &regular, false).unwrap();
        let (b, _, _) = model.run_inference(&pair, &slowfast, false).unwrap();
        assert_eq!(
            a.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn on_the_fly_inference_close_to_precomputed() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let model = StereoModel::<f32>::new(&mut rng, &tiny_cfg()).unwrap();
        let pair = rand_pair(&mut rng, 32, 64);
        let mut opts = RolloutOptions::inference(3, 3).unwrap();
        let (a, _, _) = model.run_inference(&pair, &opts, false).unwrap();
        opts.on_the_fly = true;
        let (b, _, _) = model.run_inference(&pair, &opts, false).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((x - y).abs() < 1e-2, "{x} vs {y}");
        }
    }

    #[test]
    fn batched_rollout_keeps_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let model = StereoModel::<f32>::new(&mut rng, &tiny_cfg()).unwrap();
        use rand::Rng;
        let imgs = Tensor::from_vec(
            (0..2 * 3 * 32 * 32).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
            &[2, 3, 32, 32],
        )
        .unwrap();
        let opts = RolloutOptions {
            schedule: IterationSchedule::regular(3, 3).unwrap(),
            keep_all: true,
            on_the_fly: false,
            phase: Phase::Train,
        };
        let rollout = model.forward_rollout(&imgs, &imgs, &opts).unwrap();
        assert_eq!(rollout.predictions.len(), 3);
        assert_eq!(rollout.predictions[0].shape(), &[2, 1, 32, 32]);
        assert_eq!(rollout.final_coarse.shape(), &[2, 1, 4, 4]);
    }
}
