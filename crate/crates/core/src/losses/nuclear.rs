use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{LossValue, PairGrad};
use crate::error::{Error, Result};
use crate::numerics::{nuclear_norm_with_grad, ProbabilityMatrix};

/// Batch nuclear-norm maximisation: `−‖P‖_* / B`, with gradient on `P`.
pub fn bnm(p: &ProbabilityMatrix) -> Result<(LossValue, Array2<f64>)> {
    let b = p.rows() as f64;
    let (norm, grad) = nuclear_norm_with_grad(&p.data().view())?;
    Ok((
        LossValue::scalar(-norm / b).with_component("nuclear_norm", norm),
        grad * (-1.0 / b),
    ))
}

pub fn bnm_loss(p: &ProbabilityMatrix) -> Result<LossValue> {
    bnm(p).map(|(l, _)| l)
}

/// How the classifier-as-critic score is aggregated over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NwdForm {
    /// `‖P‖_* / N` per domain.
    #[default]
    NuclearNorm,
    /// Mean of per-sample scores, each the nuclear (= Euclidean) norm of one row.
    PerSampleMean,
}

/// Nuclear-norm Wasserstein discrepancy between source and target
/// prediction matrices.
pub fn nwd(ps: &ProbabilityMatrix, pt: &ProbabilityMatrix, form: NwdForm) -> Result<(LossValue, PairGrad)> {
    if ps.class_count() != pt.class_count() {
        return Err(Error::ShapeMismatch(format!(
            "class counts {} vs {}",
            ps.class_count(),
            pt.class_count()
        )));
    }
    let (ss, gs) = critic(ps, form)?;
    let (st, gt) = critic(pt, form)?;
    Ok((
        LossValue::scalar(ss - st)
            .with_component("source_score", ss)
            .with_component("target_score", st),
        PairGrad {
            source: gs,
            target: -gt,
        },
    ))
}

pub fn nwd_loss(ps: &ProbabilityMatrix, pt: &ProbabilityMatrix, form: NwdForm) -> Result<LossValue> {
    nwd(ps, pt, form).map(|(l, _)| l)
}

fn critic(p: &ProbabilityMatrix, form: NwdForm) -> Result<(f64, Array2<f64>)> {
    let n = p.rows() as f64;
    match form {
        NwdForm::NuclearNorm => {
            let (norm, grad) = nuclear_norm_with_grad(&p.data().view())?;
            Ok((norm / n, grad / n))
        }
        NwdForm::PerSampleMean => {
            let mut grad = p.data().clone();
            let mut total = 0.0;
            for mut row in grad.rows_mut() {
                let norm = row.dot(&row).sqrt();
                total += norm;
                if norm > 0.0 {
                    row /= norm * n;
                }
            }
            Ok((total / n, grad))
        }
    }
}
