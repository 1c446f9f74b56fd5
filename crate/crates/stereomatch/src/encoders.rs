//! Image encoders.
//!
//! The feature encoder maps each image of a rectified pair to a dense
//! feature map at 1/4 or 1/8 resolution used for correlation. The context
//! encoder (left image only) produces, per refinement level, injected
//! context features and the initial hidden state. A shared-backbone
//! variant derives both from a single trunk.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Norm2d, NormKind, Phase, ResidualBlock};
use crate::tensor::ops;
use crate::tensor::{ParamVisitor, Scalar, Tensor};

/// Extents must be divisible by this after padding; covers three levels of
/// hidden state below the coarsest feature scale.
pub const PAD_MULTIPLE: usize = 32;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    /// Feature-map downsampling factor `s` (4 or 8).
    pub downsample: usize,
    /// Derive correlation and context features from one trunk.
    pub shared_backbone: bool,
    /// Channel widths of the three residual stages.
    pub stage_widths: [usize; 3],
    /// Correlation feature dimension.
    pub feature_dim: usize,
    /// Residual blocks per stage.
    pub blocks_per_stage: usize,
    /// Refinement levels (1..=3); each gets context + initial hidden state.
    pub levels: usize,
    /// Hidden-state channels per level.
    pub hidden_dim: usize,
    /// Injected context channels per level.
    pub context_dim: usize,
    /// Normalization used in the context trunk (the feature trunk always
    /// uses instance normalization).
    pub context_norm: NormKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            downsample: 8,
            shared_backbone: false,
            stage_widths: [64, 96, 128],
            feature_dim: 256,
            blocks_per_stage: 2,
            levels: 3,
            hidden_dim: 128,
            context_dim: 128,
            context_norm: NormKind::Batch,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample != 4 && self.downsample != 8 {
            return Err(Error::contract(
                "encoder_config",
                format!("downsample must be 4 or 8, got {}", self.downsample),
            ));
        }
        if !(1..=3).contains(&self.levels) {
            return Err(Error::contract(
                "encoder_config",
                format!("levels must be 1..=3, got {}", self.levels),
            ));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::contract("encoder_config", "blocks_per_stage == 0"));
        }
        Ok(())
    }
}

/// A rectified image pair, `[3, H, W]` each, values in `[0, 1]`.
pub struct ImagePair<T: Scalar> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
}

impl<T: Scalar> ImagePair<T> {
    pub fn new(left: Tensor<T>, right: Tensor<T>) -> Result<Self> {
        if left.shape() != right.shape() {
            return Err(Error::shape("image_pair", left.shape(), right.shape()));
        }
        if left.shape().len() != 3 || left.shape()[0] != 3 {
            return Err(Error::contract(
                "image_pair",
                format!("expected [3, H, W] images, got {:?}", left.shape()),
            ));
        }
        Ok(ImagePair { left, right })
    }

    pub fn height(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[2]
    }
}

/// Remembers the pre-padding extents so full-resolution outputs can be
/// cropped back exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub orig_h: usize,
    pub orig_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl CropRecord {
    /// True when padding added nothing.
    pub fn is_empty(&self) -> bool {
        self.orig_h == self.padded_h && self.orig_w == self.padded_w
    }

    /// Crop a full-resolution `[.., padded_h, padded_w]` map back to the
    /// original extents.
    pub fn crop<T: Scalar>(&self, full: &Tensor<T>) -> Result<Tensor<T>> {
        let rank = full.shape().len();
        if rank < 2
            || full.shape()[rank - 2] != self.padded_h
            || full.shape()[rank - 1] != self.padded_w
        {
            return Err(Error::contract(
                "crop",
                format!(
                    "expected trailing extents {}x{}, got {:?}",
                    self.padded_h,
                    self.padded_w,
                    full.shape()
                ),
            ));
        }
        let planes: usize = full.shape()[..rank - 2].iter().product();
        let (ph, pw) = (self.padded_h, self.padded_w);
        let (oh, ow) = (self.orig_h, self.orig_w);
        let mut data = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for y in 0..oh {
                let base = p * ph * pw + y * pw;
                data.extend_from_slice(&full.data()[base..base + ow]);
            }
        }
        let mut shape = full.shape().to_vec();
        shape[rank - 2] = oh;
        shape[rank - 1] = ow;
        Tensor::from_vec(data, &shape)
    }
}

fn replicate_pad<T: Scalar>(img: &Tensor<T>, new_h: usize, new_w: usize) -> Tensor<T> {
    let [c, h, w] = *img.shape() else {
        unreachable!("validated by ImagePair")
    };
    let mut data = vec![T::zero(); c * new_h * new_w];
    for ch in 0..c {
        for y in 0..new_h {
            let sy = y.min(h - 1);
            let src = &img.data()[ch * h * w + sy * w..ch * h * w + (sy + 1) * w];
            let dst = &mut data[ch * new_h * new_w + y * new_w..ch * new_h * new_w + (y + 1) * new_w];
            dst[..w].copy_from_slice(src);
            let edge = src[w - 1];
            for v in &mut dst[w..] {
                *v = edge;
            }
        }
    }
    Tensor::from_vec(data, &[c, new_h, new_w]).expect("pad shape")
}

/// Replicate-pad both images on the bottom and right edges so the extents
/// divide [`PAD_MULTIPLE`]. Returns the padded pair and the crop record
/// that inverts the padding on full-resolution outputs.
pub fn pad_input<T: Scalar>(pair: &ImagePair<T>) -> (ImagePair<T>, CropRecord) {
    let (h, w) = (pair.height(), pair.width());
    let new_h = h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let new_w = w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let record = CropRecord {
        orig_h: h,
        orig_w: w,
        padded_h: new_h,
        padded_w: new_w,
    };
    if record.is_empty() {
        return (
            ImagePair {
                left: pair.left.clone(),
                right: pair.right.clone(),
            },
            record,
        );
    }
    (
        ImagePair {
            left: replicate_pad(&pair.left, new_h, new_w),
            right: replicate_pad(&pair.right, new_h, new_w),
        },
        record,
    )
}

/// Per-level context features (relu) and initial hidden states (tanh).
pub struct ContextBundle<T: Scalar> {
    pub context: Vec<Tensor<T>>,
    pub hidden: Vec<Tensor<T>>,
}

impl<T: Scalar> ContextBundle<T> {
    pub fn levels(&self) -> usize {
        self.context.len()
    }
}

/// Residual trunk shared by the encoder variants: a strided stem plus
/// three stages, downsampling to 1/4 or 1/8 resolution.
struct Trunk<T: Scalar> {
    stem: Conv2d<T>,
    stem_norm: Norm2d<T>,
    stages: Vec<Vec<ResidualBlock<T>>>,
}

impl<T: Scalar> Trunk<T> {
    fn new(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, norm: NormKind) -> Self {
        let [w0, w1, w2] = cfg.stage_widths;
        let stem = Conv2d::new(rng, 3, w0, 3, 2, 1);
        let stem_norm = Norm2d::new(norm, w0);
        // Stage strides place the remaining downsampling: x2 at stage 2,
        // and x2 at stage 3 only for s=8.
        let stage3_stride = if cfg.downsample == 8 { 2 } else { 1 };
        let plan = [(w0, w0, 1usize), (w0, w1, 2), (w1, w2, stage3_stride)];
        let stages = plan
            .iter()
            .map(|&(cin, cout, stride)| {
                (0..cfg.blocks_per_stage)
                    .map(|b| {
                        if b == 0 {
                            ResidualBlock::new(rng, cin, cout, stride, norm)
                        } else {
                            ResidualBlock::new(rng, cout, cout, 1, norm)
                        }
                    })
                    .collect()
            })
            .collect();
        Trunk {
            stem,
            stem_norm,
            stages,
        }
    }

    fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let mut h = ops::relu(&self.stem_norm.forward(&self.stem.forward(x)?, phase)?);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h, phase)?;
            }
        }
        Ok(h)
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.stem.visit_params(&format!("{prefix}.stem"), f);
        self.stem_norm.visit_params(&format!("{prefix}.stem_norm"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.visit_params(&format!("{prefix}.stage{i}.block{b}"), f);
            }
        }
    }
}

/// Per-level context heads hanging off a trunk, with stride-2 residual
/// blocks between successive (coarser) levels.
struct ContextHeads<T: Scalar> {
    downs: Vec<ResidualBlock<T>>,
    heads: Vec<Conv2d<T>>,
    hidden_dim: usize,
}

impl<T: Scalar> ContextHeads<T> {
    fn new(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, norm: NormKind) -> Self {
        let w2 = cfg.stage_widths[2];
        let out = cfg.hidden_dim + cfg.context_dim;
        let heads = (0..cfg.levels)
            .map(|_| Conv2d::new(rng, w2, out, 3, 1, 1))
            .collect();
        let downs = (1..cfg.levels)
            .map(|_| ResidualBlock::new(rng, w2, w2, 2, norm))
            .collect();
        ContextHeads {
            downs,
            heads,
            hidden_dim: cfg.hidden_dim,
        }
    }

    fn forward(&self, trunk_out: &Tensor<T>, phase: Phase) -> Result<ContextBundle<T>> {
        let mut context = Vec::with_capacity(self.heads.len());
        let mut hidden = Vec::with_capacity(self.heads.len());
        let mut feat = trunk_out.clone();
        for (level, head) in self.heads.iter().enumerate() {
            if level > 0 {
                feat = self.downs[level - 1].forward(&feat, phase)?;
            }
            let raw = head.forward(&feat)?;
            let channel_axis = raw.shape().len() - 3;
            let h = ops::narrow(&raw, channel_axis, 0, self.hidden_dim)?;
            let c = ops::narrow(
                &raw,
                channel_axis,
                self.hidden_dim,
                raw.shape()[channel_axis] - self.hidden_dim,
            )?;
            hidden.push(ops::tanh(&h));
            context.push(ops::relu(&c));
        }
        Ok(ContextBundle { context, hidden })
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (i, d) in self.downs.iter().enumerate() {
            d.visit_params(&format!("{prefix}.down{i}"), f);
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.visit_params(&format!("{prefix}.head{i}"), f);
        }
    }
}

enum Variant<T: Scalar> {
    Separate {
        feature_trunk: Trunk<T>,
        feature_proj: Conv2d<T>,
        context_trunk: Trunk<T>,
        context_heads: ContextHeads<T>,
    },
    Shared {
        trunk: Trunk<T>,
        feature_proj: Conv2d<T>,
        context_heads: ContextHeads<T>,
    },
}

/// The configured encoder pair (or shared backbone).
pub struct Encoders<T: Scalar> {
    cfg: EncoderConfig,
    variant: Variant<T>,
}

impl<T: Scalar> Encoders<T> {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let w2 = cfg.stage_widths[2];
        let variant = if cfg.shared_backbone {
            let trunk = Trunk::new(rng, cfg, NormKind::Instance);
            let feature_proj = Conv2d::new(rng, w2, cfg.feature_dim, 1, 1, 0);
            let context_heads = ContextHeads::new(rng, cfg, NormKind::Instance);
            Variant::Shared {
                trunk,
                feature_proj,
                context_heads,
            }
        } else {
            Variant::Separate {
                feature_trunk: Trunk::new(rng, cfg, NormKind::Instance),
                feature_proj: Conv2d::new(rng, w2, cfg.feature_dim, 1, 1, 0),
                context_trunk: Trunk::new(rng, cfg, cfg.context_norm),
                context_heads: ContextHeads::new(rng, cfg, cfg.context_norm),
            }
        };
        Ok(Encoders {
            cfg: cfg.clone(),
            variant,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn check_divisible(&self, img: &Tensor<T>) -> Result<()> {
        let rank = img.shape().len();
        let (h, w) = (img.shape()[rank - 2], img.shape()[rank - 1]);
        if h % PAD_MULTIPLE != 0 || w % PAD_MULTIPLE != 0 {
            return Err(Error::contract(
                "encode",
                format!("extents {h}x{w} not divisible by {PAD_MULTIPLE}; pad the input first"),
            ));
        }
        Ok(())
    }

    /// Correlation features for one image.
    pub fn feature_encode(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_divisible(img)?;
        match &self.variant {
            Variant::Separate {
                feature_trunk,
                feature_proj,
                ..
            } => feature_proj.forward(&feature_trunk.forward(img, Phase::Eval)?),
            Variant::Shared {
                trunk,
                feature_proj,
                ..
            } => feature_proj.forward(&trunk.forward(img, Phase::Eval)?),
        }
    }

    /// Context features and initial hidden states for the left image.
    pub fn context_encode(&self, img: &Tensor<T>, phase: Phase) -> Result<ContextBundle<T>> {
        self.check_divisible(img)?;
        match &self.variant {
            Variant::Separate {
                context_trunk,
                context_heads,
                ..
            } => context_heads.forward(&context_trunk.forward(img, phase)?, phase),
            Variant::Shared {
                trunk,
                context_heads,
                ..
            } => context_heads.forward(&trunk.forward(img, Phase::Eval)?, phase),
        }
    }

    /// Encode a (possibly batched) pair: correlation features for both
    /// images plus the context bundle from the left. In shared-backbone
    /// mode the left trunk activations are reused for the context heads.
    pub fn encode(
        &self,
        left: &Tensor<T>,
        right: &Tensor<T>,
        phase: Phase,
    ) -> Result<(Tensor<T>, Tensor<T>, ContextBundle<T>)> {
        self.check_divisible(left)?;
        self.check_divisible(right)?;
        match &self.variant {
            Variant::Separate {
                feature_trunk,
                feature_proj,
                context_trunk,
                context_heads,
            } => {
                let fl = feature_proj.forward(&feature_trunk.forward(left, Phase::Eval)?)?;
                let fr = feature_proj.forward(&feature_trunk.forward(right, Phase::Eval)?)?;
                let bundle = context_heads.forward(&context_trunk.forward(left, phase)?, phase)?;
                Ok((fl, fr, bundle))
            }
            Variant::Shared {
                trunk,
                feature_proj,
                context_heads,
            } => {
                let tl = trunk.forward(left, Phase::Eval)?;
                let tr = trunk.forward(right, Phase::Eval)?;
                let fl = feature_proj.forward(&tl)?;
                let fr = feature_proj.forward(&tr)?;
                let bundle = context_heads.forward(&tl, phase)?;
                Ok((fl, fr, bundle))
            }
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        match &self.variant {
            Variant::Separate {
                feature_trunk,
                feature_proj,
                context_trunk,
                context_heads,
            } => {
                feature_trunk.visit_params(&format!("{prefix}.fnet"), f);
                feature_proj.visit_params(&format!("{prefix}.fproj"), f);
                context_trunk.visit_params(&format!("{prefix}.cnet"), f);
                context_heads.visit_params(&format!("{prefix}.chead"), f);
            }
            Variant::Shared {
                trunk,
                feature_proj,
                context_heads,
            } => {
                trunk.visit_params(&format!("{prefix}.trunk"), f);
                feature_proj.visit_params(&format!("{prefix}.fproj"), f);
                context_heads.visit_params(&format!("{prefix}.chead"), f);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        crate::nn::param_count(|f| self.visit_params("enc", f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig {
            stage_widths: [8, 12, 16],
            feature_dim: 24,
            blocks_per_stage: 1,
            hidden_dim: 8,
            context_dim: 8,
            ..EncoderConfig::default()
        }
    }

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
        use rand::Rng;
        Tensor::from_vec(
            (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
            &[3, h, w],
        )
        .unwrap()
    }

    #[test]
    fn feature_shapes_follow_downsample_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = rand_image(&mut rng, 64, 128);
        for (s, expect) in [(8usize, [24usize, 8, 16]), (4, [24, 16, 32])] {
            let cfg = EncoderConfig {
                downsample: s,
                ..toy_cfg()
            };
            let enc = Encoders::<f32>::new(&mut rng, &cfg).unwrap();
            let f = enc.feature_encode(&img).unwrap();
            assert_eq!(f.shape(), &expect);
        }
    }

    #[test]
    fn feature_encode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoders::<f32>::new(&mut rng, &toy_cfg()).unwrap();
        let img = rand_image(&mut rng, 32, 32);
        let a = enc.feature_encode(&img).unwrap();
        let b = enc.feature_encode(&img).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn context_levels_and_hidden_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = toy_cfg();
        let enc = Encoders::<f32>::new(&mut rng, &cfg).unwrap();
        let img = rand_image(&mut rng, 64, 128);
        let bundle = enc.context_encode(&img, Phase::Eval).unwrap();
        assert_eq!(bundle.levels(), 3);
        assert_eq!(bundle.hidden[0].shape(), &[8, 8, 16]);
        assert_eq!(bundle.hidden[1].shape(), &[8, 4, 8]);
        assert_eq!(bundle.hidden[2].shape(), &[8, 2, 4]);
        for h in &bundle.hidden {
            assert!(h.iter().all(|v| *v > -1.0 && *v < 1.0));
        }
        for c in &bundle.context {
            assert!(c.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn outputs_finite_for_unit_range_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoders::<f32>::new(&mut rng, &toy_cfg()).unwrap();
        let img = rand_image(&mut rng, 32, 64);
        let f = enc.feature_encode(&img).unwrap();
        assert!(f.all_finite());
        let b = enc.context_encode(&img, Phase::Eval).unwrap();
        assert!(b.context.iter().all(|c| c.all_finite()));
    }

    #[test]
    fn shared_backbone_has_strictly_fewer_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sep = Encoders::<f32>::new(&mut rng, &toy_cfg()).unwrap();
        let shared_cfg = EncoderConfig {
            shared_backbone: true,
            ..toy_cfg()
        };
        let shared = Encoders::<f32>::new(&mut rng, &shared_cfg).unwrap();
        assert!(shared.param_count() < sep.param_count());
    }

    #[test]
    fn pad_round_trips_kitti_extents() {
        let left = Tensor::full(&[3, 375, 1242], 0.5f32);
        let right = Tensor::full(&[3, 375, 1242], 0.5f32);
        let pair = ImagePair::new(left, right).unwrap();
        let (padded, rec) = pad_input(&pair);
        assert_eq!(padded.left.shape(), &[3, 384, 1248]);
        assert!(!rec.is_empty());
        let disp = Tensor::full(&[1, 384, 1248], 2.0f32);
        let cropped = rec.crop(&disp).unwrap();
        assert_eq!(cropped.shape(), &[1, 375, 1242]);
    }

    #[test]
    fn pad_noop_for_divisible_input() {
        let left = Tensor::full(&[3, 64, 96], 0.1f32);
        let right = Tensor::full(&[3, 64, 96], 0.2f32);
        let pair = ImagePair::new(left.clone(), right).unwrap();
        let (padded, rec) = pad_input(&pair);
        assert!(rec.is_empty());
        assert_eq!(padded.left.data(), left.data());
        let disp = Tensor::full(&[1, 64, 96], 1.0f32);
        assert_eq!(rec.crop(&disp).unwrap().data(), disp.data());
    }

    #[test]
    fn feature_encoder_is_translation_covariant() {
        // A texture block on wide constant flanks, shifted horizontally by
        // s pixels, must shift the feature map by one column. Constant
        // flanks keep the per-map value multiset (and so the instance-norm
        // statistics) unchanged, isolating pure translation.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = EncoderConfig {
            blocks_per_stage: 2,
            ..toy_cfg()
        };
        let s = cfg.downsample;
        let enc = Encoders::<f32>::new(&mut rng, &cfg).unwrap();
        let (h, w) = (64usize, 480usize);
        let (tex_w, tex_x) = (64usize, 192usize);
        use rand::Rng;
        let texture: Vec<f32> = (0..3 * h * tex_w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let make = |x0: usize| {
            let mut data = vec![0.5f32; 3 * h * w];
            for c in 0..3 {
                for y in 0..h {
                    for t in 0..tex_w {
                        data[(c * h + y) * w + x0 + t] = texture[(c * h + y) * tex_w + t];
                    }
                }
            }
            Tensor::from_vec(data, &[3, h, w]).unwrap()
        };
        let f1 = enc.feature_encode(&make(tex_x)).unwrap();
        let f2 = enc.feature_encode(&make(tex_x + s)).unwrap();
        let [c, fh, fw] = *f1.shape() else { unreachable!() };
        // Interior feature columns, well clear of the image borders.
        let mut worst = 0.0f32;
        for ch in 0..c {
            for y in 0..fh {
                for x in 8..fw - 8 {
                    let a = f2.data()[(ch * fh + y) * fw + x];
                    let b = f1.data()[(ch * fh + y) * fw + x - 1];
                    worst = worst.max((a - b).abs());
                }
            }
        }
        assert!(worst < 1e-4, "max interior deviation {worst}");
    }

    #[test]
    fn undersized_input_is_rejected_without_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoders::<f32>::new(&mut rng, &toy_cfg()).unwrap();
        let img = rand_image(&mut rng, 33, 64);
        assert!(enc.feature_encode(&img).is_err());
    }
}
