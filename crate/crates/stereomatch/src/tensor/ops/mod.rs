//! Differentiable tensor operations.

mod conv;
mod elementwise;
mod matmul;
mod norm;
mod reduce;
mod resample;
mod structure;

pub use conv::conv2d;
pub use elementwise::{
    abs, add, add_channel_bias, add_scalar, clamp_data, mul, neg, relu, scale, sigmoid, sub, tanh,
};
pub use matmul::matmul;
pub use norm::{batch_norm_eval, batch_norm_train, instance_norm, softmax, BatchStats};
pub use reduce::{mean, sum};
pub use resample::{
    avgpool_lastdim, bilinear_sample_1d, downsample2x_mean, interpolate2d, upsample2x_bilinear,
};
pub use structure::{concat, narrow, reshape};

pub(crate) use matmul::{gemm_acc, gemm_at_acc, gemm_bt_acc};
