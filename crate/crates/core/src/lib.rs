//! Category-anchor guided unsupervised domain adaptation for per-pixel
//! segmentation, at desk scale.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
pub(crate) mod codec;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
