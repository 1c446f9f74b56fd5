//! A self-contained CPU stereo-matching engine.
//!
//! Given a rectified image pair, the engine estimates a dense disparity
//! field by iterative refinement: image features are correlated along
//! epipolar lines into a pooled cost pyramid, recurrent convolutional
//! units refine a coarse disparity estimate while exchanging hidden state
//! across resolutions, and a learned convex combination upsamples the
//! result to full resolution. Everything — including the reverse-mode
//! autodiff that trains it — is implemented here with no external
//! numerics dependencies.

pub mod audit;
pub mod cli;
pub mod correlation;
pub mod encoders;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod selfcheck;
pub mod tensor;
pub mod training;
pub mod update;

pub use error::{Error, Result};
pub use tensor::{Param, Scalar, Tensor};

