//! Unsupervised domain adaptation toolkit.
//!
//! Seven adaptation objectives (Deep CORAL, DANN, DSAN, BNM, DALN, DCAN and an
//! MMD objective for frozen encoders) over a shared backbone → bottleneck →
//! classifier model, the training loop that combines them with source
//! cross-entropy, evaluation metrics (accuracy family, proxy A-distance,
//! Grad-CAM) and the stress scenarios used to compare them.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversarial;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcam;
pub mod harness;
pub mod losses;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod reference;
pub mod train;

pub use error::{Error, Result};
