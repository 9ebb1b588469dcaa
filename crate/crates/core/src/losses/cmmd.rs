use nalgebra::DMatrix;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::kernel_quad::{pool, split_rows, weighted_kernel_sum};
use super::{LossValue, PairGrad};
use crate::error::{Error, Result};
use crate::numerics::{from_nalgebra, to_nalgebra, FeatureMatrix, KernelSpec, ProbabilityMatrix};

/// Kernels and ridge used by the conditional MMD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmmdConfig {
    pub feature_kernel: KernelSpec,
    pub label_kernel: KernelSpec,
    /// Added to the label Gram diagonal before inversion.
    pub regularizer: f64,
}

impl Default for CmmdConfig {
    fn default() -> Self {
        Self {
            feature_kernel: KernelSpec::default(),
            label_kernel: KernelSpec::linear(),
            regularizer: 1.0,
        }
    }
}

/// Conditional MMD in trace form:
/// `Tr(L_s L̃_s⁻¹ K_s L̃_s⁻¹) + Tr(L_t L̃_t⁻¹ K_t L̃_t⁻¹) − 2 Tr(L_ts L̃_s⁻¹ K_st L̃_t⁻¹)`
/// with `L̃ = L + regularizer·I`.
///
/// Gradients flow to the features only; label matrices are constants.
pub fn cmmd(
    fs: &FeatureMatrix,
    ft: &FeatureMatrix,
    ys: &ProbabilityMatrix,
    yt: &ProbabilityMatrix,
    cfg: &CmmdConfig,
) -> Result<(LossValue, PairGrad)> {
    let (ns, nt) = (fs.rows(), ft.rows());
    if fs.dim() != ft.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dims {} vs {}",
            fs.dim(),
            ft.dim()
        )));
    }
    if ys.rows() != ns || yt.rows() != nt || ys.class_count() != yt.class_count() {
        return Err(Error::ShapeMismatch(
            "label matrices must match feature rows and share a class count".into(),
        ));
    }
    if !(cfg.regularizer >= 0.0) {
        return Err(Error::config("cmmd.regularizer", "must be >= 0"));
    }
    let (xs, xt) = (fs.data().view(), ft.data().view());
    let kx = cfg.feature_kernel.resolve(&xs, &xt)?;
    let (ls_in, lt_in) = (ys.data().view(), yt.data().view());
    let ky = cfg.label_kernel.resolve(&ls_in, &lt_in)?;

    let l_s = to_nalgebra(&ky.matrix(&ls_in, &ls_in).view());
    let l_t = to_nalgebra(&ky.matrix(&lt_in, &lt_in).view());
    let l_ts = to_nalgebra(&ky.matrix(&lt_in, &ls_in).view());
    let k_s = to_nalgebra(&kx.matrix(&xs, &xs).view());
    let k_t = to_nalgebra(&kx.matrix(&xt, &xt).view());
    let k_st = to_nalgebra(&kx.matrix(&xs, &xt).view());

    let a_s = regularized_inverse(&l_s, cfg.regularizer, "source")?;
    let a_t = regularized_inverse(&l_t, cfg.regularizer, "target")?;

    let term_s = (&l_s * &a_s * &k_s * &a_s).trace();
    let term_t = (&l_t * &a_t * &k_t * &a_t).trace();
    let term_st = (&l_ts * &a_s * &k_st * &a_t).trace();
    let value = term_s + term_t - 2.0 * term_st;

    // Same quantity as a weighted kernel sum over pooled rows, for gradients.
    let m_ss = from_nalgebra(&(&a_s * &l_s * &a_s));
    let m_tt = from_nalgebra(&(&a_t * &l_t * &a_t));
    let m_st = from_nalgebra(&(&a_s * l_ts.transpose() * &a_t));
    let n = ns + nt;
    let mut w = Array2::zeros((n, n));
    w.slice_mut(s![..ns, ..ns]).assign(&m_ss);
    w.slice_mut(s![ns.., ns..]).assign(&m_tt);
    w.slice_mut(s![..ns, ns..]).assign(&(-&m_st));
    w.slice_mut(s![ns.., ..ns]).assign(&(-m_st.t().to_owned()));
    let z = pool(&xs, &xt);
    let (_, grad) = weighted_kernel_sum(&z.view(), &w, &kx);
    let (gs, gt) = split_rows(grad, ns);

    Ok((
        LossValue::scalar(value)
            .with_component("trace_source", term_s)
            .with_component("trace_target", term_t)
            .with_component("trace_cross", term_st),
        PairGrad { source: gs, target: gt },
    ))
}

pub fn cmmd_loss(
    fs: &FeatureMatrix,
    ft: &FeatureMatrix,
    ys: &ProbabilityMatrix,
    yt: &ProbabilityMatrix,
    cfg: &CmmdConfig,
) -> Result<LossValue> {
    cmmd(fs, ft, ys, yt, cfg).map(|(l, _)| l)
}

fn regularized_inverse(l: &DMatrix<f64>, reg: f64, side: &str) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    let lt = l + DMatrix::identity(n, n) * reg;
    match lt.clone().cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => {
            let eig = lt.symmetric_eigenvalues();
            let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
            let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Err(Error::Numeric(format!(
                "{side} regularized label Gram is singular (n={n}, regularizer={reg}, \
                 eigenvalues in [{min:.3e}, {max:.3e}], condition ~ {:.3e})",
                max.abs() / min.abs().max(f64::MIN_POSITIVE)
            )))
        }
    }
}
