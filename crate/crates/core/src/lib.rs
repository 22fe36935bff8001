//! poseforge: SVD-guided similarity alignment of 2-D skeleton sequences
//! with a learnable refiner, distribution-aware feature alignment, and an
//! EDM diffusion sampler with HJB-style per-step guidance.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align_model;
pub mod error;
pub mod feature_align;
pub mod hjb;
pub mod misalign;
pub mod nnet;
pub mod par;
pub mod rng;
pub mod similarity;
pub mod skeleton;

pub use error::{Error, Result};
