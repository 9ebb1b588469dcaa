use ndarray::{concatenate, Array2, ArrayView2, Axis};

use crate::numerics::ResolvedKernel;

/// Pooled rows `[x; y]`.
pub(super) fn pool(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(0), &[x.view(), y.view()]).expect("feature dims checked by caller")
}

/// `Σ_ij W_ij k(z_i, z_j)` and its gradient with respect to every row of `z`.
///
/// All MMD-family estimators here are this quadratic form for some weight
/// matrix `W` over the pooled source+target rows.
pub(super) fn weighted_kernel_sum(
    z: &ArrayView2<f64>,
    w: &Array2<f64>,
    kernel: &ResolvedKernel,
) -> (f64, Array2<f64>) {
    let n = z.nrows();
    let d = z.ncols();
    debug_assert_eq!(w.dim(), (n, n));
    let mut value = 0.0;
    let mut grad = Array2::zeros((n, d));
    match kernel {
        ResolvedKernel::Linear => {
            let gram = z.dot(&z.t());
            value = (&gram * w).sum();
            let sym = w + &w.t();
            grad = sym.dot(z);
        }
        ResolvedKernel::Gaussian { sigmas } => {
            let inv2: Vec<f64> = sigmas.iter().map(|s| 1.0 / (s * s)).collect();
            for i in 0..n {
                for j in 0..n {
                    let wij = w[[i, j]];
                    let wsym = wij + w[[j, i]];
                    if wij == 0.0 && wsym == 0.0 {
                        continue;
                    }
                    let zi = z.row(i);
                    let zj = z.row(j);
                    let d2: f64 = zi.iter().zip(zj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    let mut k = 0.0;
                    let mut dk = 0.0;
                    for &c in &inv2 {
                        let e = (-0.5 * d2 * c).exp();
                        k += e;
                        dk += e * c;
                    }
                    value += wij * k;
                    if i != j && wsym != 0.0 {
                        for (g, (a, b)) in grad.row_mut(i).iter_mut().zip(zi.iter().zip(zj.iter())) {
                            *g -= wsym * dk * (a - b);
                        }
                    }
                }
            }
        }
    }
    (value, grad)
}

/// Splits pooled row gradients back into source and target blocks.
pub(super) fn split_rows(grad: Array2<f64>, n_source: usize) -> (Array2<f64>, Array2<f64>) {
    let s = grad.slice(ndarray::s![..n_source, ..]).to_owned();
    let t = grad.slice(ndarray::s![n_source.., ..]).to_owned();
    (s, t)
}
