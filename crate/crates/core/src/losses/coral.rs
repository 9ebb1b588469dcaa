use ndarray::{Array2, ArrayView2, Axis};

use super::{LossValue, PairGrad};
use crate::error::{Error, Result};
use crate::numerics::{covariance_of, FeatureMatrix};

/// Deep CORAL: `‖C_S − C_T‖²_F / (4d²)` with its feature gradients.
pub fn coral(fs: &FeatureMatrix, ft: &FeatureMatrix) -> Result<(LossValue, PairGrad)> {
    let d = fs.dim();
    if ft.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "coral feature dims {} vs {}",
            d,
            ft.dim()
        )));
    }
    let cs = covariance_of(&fs.data().view())?;
    let ct = covariance_of(&ft.data().view())?;
    let diff = &cs - &ct;
    let scale = 1.0 / (4.0 * (d * d) as f64);
    let value = scale * diff.iter().map(|v| v * v).sum::<f64>();

    // dL/dC = 2·scale·(C_S − C_T); dC/dD pulls back as 2/(n−1)·D_c·G
    let g = &diff * (2.0 * scale);
    let grad_s = covariance_pullback(&fs.data().view(), &g);
    let grad_t = -covariance_pullback(&ft.data().view(), &g);
    Ok((
        LossValue::scalar(value).with_component("coral", value),
        PairGrad {
            source: grad_s,
            target: grad_t,
        },
    ))
}

pub fn coral_loss(fs: &FeatureMatrix, ft: &FeatureMatrix) -> Result<LossValue> {
    coral(fs, ft).map(|(l, _)| l)
}

fn covariance_pullback(d: &ArrayView2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let n = d.nrows();
    let mean = d.mean_axis(Axis(0)).expect("n >= 2");
    let centered = d - &mean;
    centered.dot(g) * (2.0 / (n - 1) as f64)
}
