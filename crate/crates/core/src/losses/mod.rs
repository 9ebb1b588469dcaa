//! Domain-discrepancy objectives over bottleneck features and prediction
//! matrices.
//!
//! Every loss comes in two flavours: a plain `*_loss` returning a
//! [`LossValue`], and a gradient-carrying variant used by the trainer. Feature
//! losses return gradients with respect to both feature batches; prediction
//! losses return gradients with respect to the probability rows (chain them
//! through [`crate::numerics::softmax_backward`] to reach logits).
//!
//! Data-dependent kernel bandwidths are frozen before differentiation, so the
//! gradients treat the bandwidth as a constant.

mod cmmd;
mod coral;
mod kernel_quad;
mod mmd;
mod nuclear;
mod mutual_info;

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use cmmd::{cmmd, cmmd_loss, CmmdConfig};
pub use coral::{coral, coral_loss};
pub use mmd::{lmmd, lmmd_loss, mmd, mmd_loss, subdomain_weights, SubdomainWeights};
pub use mutual_info::{mutual_info, mutual_info_loss};
pub use nuclear::{bnm, bnm_loss, nwd, nwd_loss, NwdForm};

/// A scalar objective plus named sub-terms.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
    /// Conditions worth surfacing, e.g. an LMMD batch with no shared class.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl LossValue {
    pub fn scalar(value: f64) -> Self {
        Self {
            value,
            ..Default::default()
        }
    }

    pub fn with_component(mut self, name: &str, value: f64) -> Self {
        self.components.insert(name.to_string(), value);
        self
    }

    pub fn with_flag(mut self, flag: &str) -> Self {
        self.flags.push(flag.to_string());
        self
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// Gradients with respect to the source and target inputs of a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    pub source: Array2<f64>,
    pub target: Array2<f64>,
}

impl PairGrad {
    pub fn zeros(source: (usize, usize), target: (usize, usize)) -> Self {
        Self {
            source: Array2::zeros(source),
            target: Array2::zeros(target),
        }
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.source *= factor;
        self.target *= factor;
        self
    }
}
