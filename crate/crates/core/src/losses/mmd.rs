use ndarray::Array2;

use super::kernel_quad::{pool, split_rows, weighted_kernel_sum};
use super::{LossValue, PairGrad};
use crate::error::{Error, Result};
use crate::numerics::{FeatureMatrix, KernelSpec, ProbabilityMatrix};

fn check_dims(fs: &FeatureMatrix, ft: &FeatureMatrix) -> Result<()> {
    if fs.dim() != ft.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dims {} vs {}",
            fs.dim(),
            ft.dim()
        )));
    }
    Ok(())
}

/// Biased (V-statistic) squared MMD: `mean K_ss + mean K_tt − 2 mean K_st`.
///
/// The reported value is clamped at zero; the raw estimate is kept in the
/// `raw` component.
pub fn mmd(fs: &FeatureMatrix, ft: &FeatureMatrix, kernel: &KernelSpec) -> Result<(LossValue, PairGrad)> {
    check_dims(fs, ft)?;
    let (ns, nt) = (fs.rows(), ft.rows());
    let (xs, xt) = (fs.data().view(), ft.data().view());
    let k = kernel.resolve(&xs, &xt)?;
    let v: Vec<f64> = std::iter::repeat_n(1.0 / ns as f64, ns)
        .chain(std::iter::repeat_n(-1.0 / nt as f64, nt))
        .collect();
    let w = Array2::from_shape_fn((ns + nt, ns + nt), |(i, j)| v[i] * v[j]);
    let z = pool(&xs, &xt);
    let (raw, grad) = weighted_kernel_sum(&z.view(), &w, &k);
    let (gs, gt) = split_rows(grad, ns);
    Ok((
        LossValue::scalar(raw.max(0.0)).with_component("raw", raw),
        PairGrad { source: gs, target: gt },
    ))
}

pub fn mmd_loss(fs: &FeatureMatrix, ft: &FeatureMatrix, kernel: &KernelSpec) -> Result<LossValue> {
    mmd(fs, ft, kernel).map(|(l, _)| l)
}

/// Per-class sample weights: each column normalised to unit mass, or all
/// zero when the class has no mass in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SubdomainWeights {
    weights: Array2<f64>,
}

impl SubdomainWeights {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn class_count(&self) -> usize {
        self.weights.ncols()
    }

    /// Classes whose column carries mass.
    pub fn active(&self) -> Vec<bool> {
        self.weights.columns().into_iter().map(|c| c.sum() > 0.0).collect()
    }
}

pub fn subdomain_weights(y: &ProbabilityMatrix) -> SubdomainWeights {
    let mut weights = y.data().clone();
    for mut col in weights.columns_mut() {
        let mass = col.sum();
        if mass > 0.0 {
            col /= mass;
        } else {
            col.fill(0.0);
        }
    }
    SubdomainWeights { weights }
}

/// Local (subdomain) MMD averaged over classes active in both domains.
///
/// When no class is shared the loss is zero and flagged `no-shared-class`.
pub fn lmmd(
    fs: &FeatureMatrix,
    ft: &FeatureMatrix,
    ws: &SubdomainWeights,
    wt: &SubdomainWeights,
    kernel: &KernelSpec,
) -> Result<(LossValue, PairGrad)> {
    check_dims(fs, ft)?;
    let (ns, nt) = (fs.rows(), ft.rows());
    if ws.weights.nrows() != ns || wt.weights.nrows() != nt {
        return Err(Error::ShapeMismatch(format!(
            "weights have {}/{} rows for {}/{} samples",
            ws.weights.nrows(),
            wt.weights.nrows(),
            ns,
            nt
        )));
    }
    if ws.class_count() != wt.class_count() {
        return Err(Error::ShapeMismatch(format!(
            "class counts {} vs {}",
            ws.class_count(),
            wt.class_count()
        )));
    }
    let (xs, xt) = (fs.data().view(), ft.data().view());
    let k = kernel.resolve(&xs, &xt)?;

    let shared: Vec<usize> = ws
        .active()
        .into_iter()
        .zip(wt.active())
        .enumerate()
        .filter_map(|(c, (a, b))| (a && b).then_some(c))
        .collect();
    if shared.is_empty() {
        return Ok((
            LossValue::scalar(0.0)
                .with_component("active_classes", 0.0)
                .with_flag("no-shared-class"),
            PairGrad::zeros(xs.dim(), xt.dim()),
        ));
    }

    let n = ns + nt;
    let mut w = Array2::zeros((n, n));
    for &c in &shared {
        let v: Vec<f64> = ws
            .weights
            .column(c)
            .iter()
            .copied()
            .chain(wt.weights.column(c).iter().map(|x| -x))
            .collect();
        for i in 0..n {
            if v[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                w[[i, j]] += v[i] * v[j];
            }
        }
    }
    w /= shared.len() as f64;

    let z = pool(&xs, &xt);
    let (value, grad) = weighted_kernel_sum(&z.view(), &w, &k);
    let (gs, gt) = split_rows(grad, ns);
    Ok((
        LossValue::scalar(value).with_component("active_classes", shared.len() as f64),
        PairGrad { source: gs, target: gt },
    ))
}

pub fn lmmd_loss(
    fs: &FeatureMatrix,
    ft: &FeatureMatrix,
    ws: &SubdomainWeights,
    wt: &SubdomainWeights,
    kernel: &KernelSpec,
) -> Result<LossValue> {
    lmmd(fs, ft, ws, wt, kernel).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Domain;
    use ndarray::array;

    fn fm(rows: &[Vec<f64>], domain: Domain) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows, domain).unwrap()
    }

    #[test]
    fn mmd_examples() {
        let a = fm(&[vec![0.0], vec![2.0]], Domain::Source);
        let b = fm(&[vec![1.0], vec![1.0]], Domain::Target);
        assert_eq!(mmd_loss(&a, &a, &KernelSpec::default()).unwrap().value, 0.0);
        assert_eq!(mmd_loss(&a, &b, &KernelSpec::linear()).unwrap().value, 0.0);
        let s = fm(&[vec![0.0]], Domain::Source);
        let t = fm(&[vec![2.0]], Domain::Target);
        assert_eq!(mmd_loss(&s, &t, &KernelSpec::linear()).unwrap().value, 4.0);
    }

    #[test]
    fn mmd_shape_mismatch() {
        let a = fm(&[vec![0.0, 1.0]], Domain::Source);
        let b = fm(&[vec![1.0]], Domain::Target);
        assert!(matches!(
            mmd_loss(&a, &b, &KernelSpec::linear()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn weights_normalise_per_class() {
        let y = ProbabilityMatrix::one_hot(&[0, 0, 1], 2).unwrap();
        let w = subdomain_weights(&y);
        assert_eq!(w.weights(), &array![[0.5, 0.0], [0.5, 0.0], [0.0, 1.0]]);

        let single = subdomain_weights(&ProbabilityMatrix::one_hot(&[0], 2).unwrap());
        assert_eq!(single.weights()[[0, 0]], 1.0);
        assert_eq!(single.active(), vec![true, false]);
        assert_eq!(single.weights().column(1).sum(), 0.0);
    }

    #[test]
    fn lmmd_examples() {
        let s = fm(&[vec![0.0]], Domain::Source);
        let t = fm(&[vec![2.0]], Domain::Target);
        let w = subdomain_weights(&ProbabilityMatrix::one_hot(&[0], 1).unwrap());
        let l = lmmd_loss(&s, &t, &w, &w, &KernelSpec::linear()).unwrap();
        assert_eq!(l.value, 4.0);

        let a = fm(&[vec![0.1, 0.4], vec![1.0, -2.0], vec![0.0, 0.3]], Domain::Source);
        let wa = subdomain_weights(&ProbabilityMatrix::one_hot(&[0, 1, 1], 2).unwrap());
        assert!(lmmd_loss(&a, &a, &wa, &wa, &KernelSpec::default()).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn lmmd_no_shared_class_is_flagged() {
        let s = fm(&[vec![0.0]], Domain::Source);
        let t = fm(&[vec![2.0]], Domain::Target);
        let ws = subdomain_weights(&ProbabilityMatrix::one_hot(&[0], 2).unwrap());
        let wt = subdomain_weights(&ProbabilityMatrix::one_hot(&[1], 2).unwrap());
        let (l, g) = lmmd(&s, &t, &ws, &wt, &KernelSpec::linear()).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.flags, vec!["no-shared-class".to_string()]);
        assert!(g.source.iter().all(|v| *v == 0.0));
    }
}
