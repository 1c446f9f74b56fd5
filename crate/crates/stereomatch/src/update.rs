//! The recurrent refinement operator.
//!
//! Convolutional GRUs maintain hidden states at up to three resolutions,
//! exchanging information through pooled and upsampled cross-connections.
//! Only the finest GRU consumes correlation lookups and emits the
//! disparity update together with the convex-upsampling mask.

use rand_chacha::ChaCha8Rng;

use crate::audit::flops;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::tensor::ops;
use crate::tensor::{sc, ParamVisitor, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct UpdateConfig {
    pub levels: usize,
    pub hidden_dim: usize,
    pub context_dim: usize,
    /// Channels delivered by the correlation lookup.
    pub corr_channels: usize,
    pub corr_enc_dim: usize,
    pub disp_enc_dim: usize,
    pub head_hidden_dim: usize,
    pub mask_hidden_dim: usize,
    /// Full-resolution upsampling factor `s`.
    pub upsample_factor: usize,
}

impl UpdateConfig {
    fn gru_input_dim(&self, level: usize) -> usize {
        let mut dim = self.context_dim;
        if level == 0 {
            dim += self.corr_enc_dim + self.disp_enc_dim;
        } else {
            // Pooled hidden state of the finer neighbor.
            dim += self.hidden_dim;
        }
        if level + 1 < self.levels {
            // Upsampled hidden state of the coarser neighbor.
            dim += self.hidden_dim;
        }
        dim
    }
}

fn channel_axis<T: Scalar>(t: &Tensor<T>) -> usize {
    t.shape().len() - 3
}

/// A convolutional gated recurrent cell over feature maps.
pub struct GruCell<T: Scalar> {
    convz: Conv2d<T>,
    convr: Conv2d<T>,
    convq: Conv2d<T>,
}

impl<T: Scalar> GruCell<T> {
    pub fn new(rng: &mut ChaCha8Rng, hidden_dim: usize, input_dim: usize) -> Self {
        let c_in = hidden_dim + input_dim;
        GruCell {
            convz: Conv2d::new(rng, c_in, hidden_dim, 3, 1, 1),
            convr: Conv2d::new(rng, c_in, hidden_dim, 3, 1, 1),
            convq: Conv2d::new(rng, c_in, hidden_dim, 3, 1, 1),
        }
    }

    /// `z = sig(Wz[h,x])`, `r = sig(Wr[h,x])`, `q = tanh(Wq[r*h, x])`,
    /// `h' = (1-z)*h + z*q`. Output stays inside (-1, 1).
    pub fn forward(&self, h: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let axis = channel_axis(h);
        let hx = ops::concat(&[h, x], axis)?;
        let z = ops::sigmoid(&self.convz.forward(&hx)?);
        let r = ops::sigmoid(&self.convr.forward(&hx)?);
        let rh = ops::mul(&r, h)?;
        let rhx = ops::concat(&[&rh, x], axis)?;
        let q = ops::tanh(&self.convq.forward(&rhx)?);
        // (1-z)*h + z*q  ==  h + z*(q - h)
        let delta = ops::mul(&z, &ops::sub(&q, h)?)?;
        ops::add(h, &delta)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.convz.visit_params(&format!("{prefix}.convz"), f);
        self.convr.visit_params(&format!("{prefix}.convr"), f);
        self.convq.visit_params(&format!("{prefix}.convq"), f);
    }
}

/// Two-conv branches encoding the correlation lookup and the current
/// disparity before they are injected into the finest GRU.
struct MotionEncoder<T: Scalar> {
    conv_c1: Conv2d<T>,
    conv_c2: Conv2d<T>,
    conv_d1: Conv2d<T>,
    conv_d2: Conv2d<T>,
}

impl<T: Scalar> MotionEncoder<T> {
    fn new(rng: &mut ChaCha8Rng, cfg: &UpdateConfig) -> Self {
        MotionEncoder {
            conv_c1: Conv2d::new(rng, cfg.corr_channels, cfg.corr_enc_dim, 1, 1, 0),
            conv_c2: Conv2d::new(rng, cfg.corr_enc_dim, cfg.corr_enc_dim, 3, 1, 1),
            conv_d1: Conv2d::new(rng, 1, cfg.disp_enc_dim, 3, 1, 1),
            conv_d2: Conv2d::new(rng, cfg.disp_enc_dim, cfg.disp_enc_dim, 3, 1, 1),
        }
    }

    fn forward(&self, corr: &Tensor<T>, disp: &Tensor<T>) -> Result<Tensor<T>> {
        let c = ops::relu(&self.conv_c2.forward(&ops::relu(&self.conv_c1.forward(corr)?))?);
        let d = ops::relu(&self.conv_d2.forward(&ops::relu(&self.conv_d1.forward(disp)?))?);
        ops::concat(&[&c, &d], channel_axis(corr))
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv_c1.visit_params(&format!("{prefix}.conv_c1"), f);
        self.conv_c2.visit_params(&format!("{prefix}.conv_c2"), f);
        self.conv_d1.visit_params(&format!("{prefix}.conv_d1"), f);
        self.conv_d2.visit_params(&format!("{prefix}.conv_d2"), f);
    }
}

/// Hidden states plus per-level injected context.
pub struct MultiLevelState<T: Scalar> {
    pub hidden: Vec<Tensor<T>>,
    pub context: Vec<Tensor<T>>,
}

impl<T: Scalar> MultiLevelState<T> {
    pub fn levels(&self) -> usize {
        self.hidden.len()
    }
}

/// Which pyramid levels a micro-step updates (index 0 = finest).
pub type LevelSet = Vec<bool>;

/// An explicit sequence of micro-steps over GRU levels.
///
/// The regular rollout updates every level each step. Slow-fast schedules
/// update coarse levels more often; an equal-count slow-fast schedule
/// degenerates to the regular rollout exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IterationSchedule {
    pub steps: Vec<LevelSet>,
}

impl IterationSchedule {
    pub fn regular(levels: usize, iters: usize) -> Result<Self> {
        if iters == 0 {
            return Err(Error::contract("schedule", "at least one update required"));
        }
        Ok(IterationSchedule {
            steps: vec![vec![true; levels]; iters],
        })
    }

    /// Proportional round-robin interleave of per-level update counts
    /// (`counts[0]` = finest). Every schedule ends on a step that updates
    /// the finest level.
    pub fn slow_fast(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::contract("schedule", "no levels"));
        }
        if counts[0] == 0 {
            return Err(Error::contract(
                "schedule",
                "finest level must be updated at least once",
            ));
        }
        if counts.iter().any(|&c| c < counts[0]) {
            return Err(Error::contract(
                "schedule",
                format!("finest level must run fewest or equal updates, got {counts:?}"),
            ));
        }
        let total = *counts.iter().max().unwrap();
        let steps = (1..=total)
            .map(|t| {
                counts
                    .iter()
                    .map(|&n| t * n / total > (t - 1) * n / total)
                    .collect()
            })
            .collect();
        Ok(IterationSchedule { steps })
    }

    /// Number of micro-steps that update the finest level (and therefore
    /// emit a disparity update).
    pub fn finest_updates(&self) -> usize {
        self.steps.iter().filter(|s| s[0]).count()
    }

    pub fn level_updates(&self, level: usize) -> usize {
        self.steps.iter().filter(|s| s[level]).count()
    }
}

/// Cost accounting collected during a rollout.
#[derive(Clone, Debug, Default)]
pub struct RolloutStats {
    pub gru_macs: Vec<u64>,
    pub gru_updates: Vec<u64>,
    pub encoder_macs: u64,
    pub volume_macs: u64,
    pub lookup_macs: u64,
    pub motion_macs: u64,
    pub head_macs: u64,
}

impl RolloutStats {
    pub fn new(levels: usize) -> Self {
        RolloutStats {
            gru_macs: vec![0; levels],
            gru_updates: vec![0; levels],
            ..Default::default()
        }
    }

    pub fn total_gru_macs(&self) -> u64 {
        self.gru_macs.iter().sum()
    }

    /// Mean MACs of one update at `level`.
    pub fn macs_per_update(&self, level: usize) -> f64 {
        if self.gru_updates[level] == 0 {
            0.0
        } else {
            self.gru_macs[level] as f64 / self.gru_updates[level] as f64
        }
    }
}

/// The multi-level update operator: per-level GRUs, the motion encoder,
/// and the disparity/mask heads.
pub struct UpdateOperator<T: Scalar> {
    pub cfg: UpdateConfig,
    grus: Vec<GruCell<T>>,
    motion: MotionEncoder<T>,
    dd_head1: Conv2d<T>,
    dd_head2: Conv2d<T>,
    mask_head1: Conv2d<T>,
    mask_head2: Conv2d<T>,
}

/// Finest-level outputs of a micro-step that updated the finest GRU.
pub struct StepOutput<T: Scalar> {
    pub delta: Tensor<T>,
    pub mask_logits: Tensor<T>,
}

impl<T: Scalar> UpdateOperator<T> {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &UpdateConfig) -> Result<Self> {
        if !(1..=3).contains(&cfg.levels) {
            return Err(Error::contract(
                "update_operator",
                format!("levels must be 1..=3, got {}", cfg.levels),
            ));
        }
        let grus = (0..cfg.levels)
            .map(|l| GruCell::new(rng, cfg.hidden_dim, cfg.gru_input_dim(l)))
            .collect();
        let motion = MotionEncoder::new(rng, cfg);
        let s = cfg.upsample_factor;
        Ok(UpdateOperator {
            grus,
            motion,
            dd_head1: Conv2d::new(rng, cfg.hidden_dim, cfg.head_hidden_dim, 3, 1, 1),
            dd_head2: Conv2d::new(rng, cfg.head_hidden_dim, 1, 3, 1, 1),
            mask_head1: Conv2d::new(rng, cfg.hidden_dim, cfg.mask_hidden_dim, 3, 1, 1),
            mask_head2: Conv2d::new(rng, cfg.mask_hidden_dim, s * s * 9, 1, 1, 0),
            cfg: cfg.clone(),
        })
    }

    /// Run one micro-step, updating the levels selected by `include`
    /// (coarsest first, so finer levels see already-updated coarse state).
    /// `corr` must be the lookup features for the current disparity and is
    /// required only when the finest level is included.
    pub fn step(
        &self,
        state: &mut MultiLevelState<T>,
        corr: Option<&Tensor<T>>,
        disp: &Tensor<T>,
        include: &[bool],
        stats: &mut RolloutStats,
    ) -> Result<Option<StepOutput<T>>> {
        let levels = self.cfg.levels;
        if state.levels() != levels || include.len() != levels {
            return Err(Error::contract(
                "update_step",
                format!(
                    "state has {} levels, include {} — operator expects {levels}",
                    state.levels(),
                    include.len()
                ),
            ));
        }
        let axis = channel_axis(&state.hidden[0]);
        for level in (0..levels).rev() {
            if !include[level] {
                continue;
            }
            let mut parts: Vec<Tensor<T>> = Vec::new();
            if level == 0 {
                let corr = corr.ok_or_else(|| {
                    Error::contract("update_step", "finest update requires correlation features")
                })?;
                let (motion, macs) = flops::measure(|| self.motion.forward(corr, disp));
                stats.motion_macs += macs;
                parts.push(motion?);
            } else {
                parts.push(ops::downsample2x_mean(&state.hidden[level - 1])?);
            }
            parts.push(state.context[level].clone());
            if level + 1 < levels {
                parts.push(ops::upsample2x_bilinear(&state.hidden[level + 1])?);
            }
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            let x = ops::concat(&refs, axis)?;
            let (new_h, macs) = flops::measure(|| self.grus[level].forward(&state.hidden[level], &x));
            stats.gru_macs[level] += macs;
            stats.gru_updates[level] += 1;
            state.hidden[level] = new_h?;
        }
        if include[0] {
            let h0 = &state.hidden[0];
            let (out, macs) = flops::measure(|| -> Result<StepOutput<T>> {
                let delta = self
                    .dd_head2
                    .forward(&ops::relu(&self.dd_head1.forward(h0)?))?;
                let mask_logits = self
                    .mask_head2
                    .forward(&ops::relu(&self.mask_head1.forward(h0)?))?;
                Ok(StepOutput { delta, mask_logits })
            });
            stats.head_macs += macs;
            Ok(Some(out?))
        } else {
            Ok(None)
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (i, gru) in self.grus.iter().enumerate() {
            gru.visit_params(&format!("{prefix}.gru{i}"), f);
        }
        self.motion.visit_params(&format!("{prefix}.motion"), f);
        self.dd_head1.visit_params(&format!("{prefix}.dd_head1"), f);
        self.dd_head2.visit_params(&format!("{prefix}.dd_head2"), f);
        self.mask_head1.visit_params(&format!("{prefix}.mask_head1"), f);
        self.mask_head2.visit_params(&format!("{prefix}.mask_head2"), f);
    }
}

/// Upsample a coarse disparity field by factor `s` as a per-pixel convex
/// combination of the scaled 3x3 coarse neighborhood (replicated at the
/// borders). Mask logits are `[s*s*9, H, W]` (or batched), grouped as
/// `[neighbor, sub-y, sub-x]`; the softmax runs over the 9 neighbors, and
/// disparity values are multiplied by `s` to convert into fine-pixel units.
pub fn convex_upsample<T: Scalar>(
    disp: &Tensor<T>,
    mask_logits: &Tensor<T>,
    s: usize,
) -> Result<Tensor<T>> {
    let (batch, batched, h, w) = match *disp.shape() {
        [1, h, w] => (1, false, h, w),
        [n, 1, h, w] => (n, true, h, w),
        _ => {
            return Err(Error::contract(
                "convex_upsample",
                format!("expected [1, H, W] or [N, 1, H, W] disparity, got {:?}", disp.shape()),
            ))
        }
    };
    let want_mask: Vec<usize> = if batched {
        vec![batch, s * s * 9, h, w]
    } else {
        vec![s * s * 9, h, w]
    };
    if mask_logits.shape() != want_mask {
        return Err(Error::shape("convex_upsample", mask_logits.shape(), &want_mask));
    }
    // Softmax over the neighbor axis.
    let grouped = ops::reshape(mask_logits, &[batch, 9, s * s, h, w])?;
    let weights = ops::softmax(&grouped, 1)?;

    let sf = sc::<T>(s as f64);
    let clamp = |v: isize, hi: usize| -> usize { v.clamp(0, hi as isize - 1) as usize };
    let (h2, w2) = (h * s, w * s);
    let mut out = vec![T::zero(); batch * h2 * w2];
    {
        let wd = weights.data();
        let dd = disp.data();
        for n in 0..batch {
            for cy in 0..h {
                for cx in 0..w {
                    for sy in 0..s {
                        for sx in 0..s {
                            let mut acc = T::zero();
                            for k in 0..9 {
                                let dy = (k / 3) as isize - 1;
                                let dx = (k % 3) as isize - 1;
                                let ny = clamp(cy as isize + dy, h);
                                let nx = clamp(cx as isize + dx, w);
                                let wv = wd[(((n * 9 + k) * s * s + sy * s + sx) * h + cy) * w + cx];
                                let dv = dd[n * h * w + ny * w + nx];
                                acc += wv * dv;
                            }
                            out[n * h2 * w2 + (cy * s + sy) * w2 + (cx * s + sx)] = acc * sf;
                        }
                    }
                }
            }
        }
    }
    let out_shape = if batched {
        vec![batch, 1, h2, w2]
    } else {
        vec![1, h2, w2]
    };
    let mixed = crate::tensor::autograd::from_op(
        out,
        out_shape,
        &[&weights, disp],
        move |args| {
            let wd = args.parents[0].data();
            let dd = args.parents[1].data();
            let mut dw = args.needs(0).then(|| vec![T::zero(); wd.len()]);
            let mut ddisp = args.needs(1).then(|| vec![T::zero(); dd.len()]);
            let clamp = |v: isize, hi: usize| -> usize { v.clamp(0, hi as isize - 1) as usize };
            for n in 0..batch {
                for cy in 0..h {
                    for cx in 0..w {
                        for sy in 0..s {
                            for sx in 0..s {
                                let g = args.adjoint
                                    [n * h2 * w2 + (cy * s + sy) * w2 + (cx * s + sx)]
                                    * sf;
                                if g == T::zero() {
                                    continue;
                                }
                                for k in 0..9 {
                                    let dy = (k / 3) as isize - 1;
                                    let dx = (k % 3) as isize - 1;
                                    let ny = clamp(cy as isize + dy, h);
                                    let nx = clamp(cx as isize + dx, w);
                                    let widx =
                                        (((n * 9 + k) * s * s + sy * s + sx) * h + cy) * w + cx;
                                    let didx = n * h * w + ny * w + nx;
                                    if let Some(dw) = dw.as_mut() {
                                        dw[widx] += g * dd[didx];
                                    }
                                    if let Some(ddisp) = ddisp.as_mut() {
                                        ddisp[didx] += g * wd[widx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![dw, ddisp]
        },
    );
    Ok(mixed)
}
