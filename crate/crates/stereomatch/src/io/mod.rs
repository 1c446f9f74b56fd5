//! File formats: PFM disparity maps, PNG/PPM images, checkpoints.

pub mod checkpoint;
pub mod image;
pub mod pfm;
