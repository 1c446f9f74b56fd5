//! Layer building blocks: convolutions with fan-in init, normalization
//! layers, and pre-activation residual blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::ops;
use crate::tensor::{no_grad, sc, Param, ParamVisitor, Scalar, Tensor};

/// Forward-pass mode; batch norm consumes batch statistics only in `Train`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    Train,
    Eval,
}

/// Normalization selector for encoder configuration.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    Batch,
    None,
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform fan-in initialization used by every convolution.
fn init_conv_weight<T: Scalar>(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
) -> Tensor<T> {
    let fan_in = (c_in * kh * kw) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let data: Vec<T> = (0..c_out * c_in * kh * kw)
        .map(|_| sc::<T>(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(data, &[c_out, c_in, kh, kw]).expect("init shape")
}

pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv2d {
            weight: Param::new(init_conv_weight(rng, c_out, c_in, kernel, kernel)),
            bias: Some(Param::new(Tensor::zeros(&[c_out]))),
            stride,
            padding,
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = ops::conv2d(x, &self.weight.get(), self.stride, self.padding)?;
        match &self.bias {
            Some(b) => ops::add_channel_bias(&y, &b.get()),
            None => Ok(y),
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

pub struct InstanceNorm2d<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: T,
}

impl<T: Scalar> InstanceNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm2d {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            eps: sc(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::instance_norm(x, &self.gamma.get(), &self.beta.get(), self.eps)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
}

pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: T,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::full(&[channels], T::one())),
            eps: sc(1e-5),
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        match phase {
            Phase::Train => {
                let (y, stats) =
                    ops::batch_norm_train(x, &self.gamma.get(), &self.beta.get(), self.eps)?;
                no_grad(|| {
                    let m = sc::<T>(self.momentum);
                    let keep = T::one() - m;
                    let update = |p: &Param<T>, newv: &[T]| {
                        let cur = p.get();
                        let data: Vec<T> = cur
                            .data()
                            .iter()
                            .zip(newv)
                            .map(|(r, b)| *r * keep + *b * m)
                            .collect();
                        p.set(Tensor::from_vec(data, cur.shape()).expect("bn stats"));
                    };
                    update(&self.running_mean, &stats.mean);
                    update(&self.running_var, &stats.var_unbiased);
                });
                Ok(y)
            }
            Phase::Eval => ops::batch_norm_eval(
                x,
                &self.gamma.get(),
                &self.beta.get(),
                self.running_mean.get().data(),
                self.running_var.get().data(),
                self.eps,
            ),
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
}

/// Norm layer chosen by configuration.
pub enum Norm2d<T: Scalar> {
    Instance(InstanceNorm2d<T>),
    Batch(BatchNorm2d<T>),
    None,
}

impl<T: Scalar> Norm2d<T> {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        match kind {
            NormKind::Instance => Norm2d::Instance(InstanceNorm2d::new(channels)),
            NormKind::Batch => Norm2d::Batch(BatchNorm2d::new(channels)),
            NormKind::None => Norm2d::None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        match self {
            Norm2d::Instance(n) => n.forward(x),
            Norm2d::Batch(n) => n.forward(x, phase),
            Norm2d::None => Ok(x.clone()),
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        match self {
            Norm2d::Instance(n) => n.visit_params(prefix, f),
            Norm2d::Batch(n) => n.visit_params(prefix, f),
            Norm2d::None => {}
        }
    }
}

/// Pre-activation residual block: two 3x3 convolutions on the
/// norm -> relu -> conv path, with a strided 1x1 projection shortcut
/// whenever the shape changes.
pub struct ResidualBlock<T: Scalar> {
    norm1: Norm2d<T>,
    conv1: Conv2d<T>,
    norm2: Norm2d<T>,
    conv2: Conv2d<T>,
    shortcut: Option<Conv2d<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        stride: usize,
        norm: NormKind,
    ) -> Self {
        let shortcut =
            (c_in != c_out || stride != 1).then(|| Conv2d::new(rng, c_in, c_out, 1, stride, 0));
        ResidualBlock {
            norm1: Norm2d::new(norm, c_in),
            conv1: Conv2d::new(rng, c_in, c_out, 3, stride, 1),
            norm2: Norm2d::new(norm, c_out),
            conv2: Conv2d::new(rng, c_out, c_out, 3, 1, 1),
            shortcut,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let h = ops::relu(&self.norm1.forward(x, phase)?);
        let h = self.conv1.forward(&h)?;
        let h = ops::relu(&self.norm2.forward(&h, phase)?);
        let h = self.conv2.forward(&h)?;
        let sc = match &self.shortcut {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        ops::add(&sc, &h)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        if let Some(s) = &self.shortcut {
            s.visit_params(&join(prefix, "shortcut"), f);
        }
    }
}

/// Count trainable scalars reachable through `visit`.
pub fn param_count<T: Scalar>(visit: impl FnOnce(&mut ParamVisitor<'_, T>)) -> usize {
    let mut total = 0usize;
    let mut f = |_: &str, p: &Param<T>| {
        if p.trainable() {
            total += p.len();
        }
    };
    visit(&mut f);
    total
}
