//! Shared numeric primitives: feature and probability matrices, covariance,
//! kernel Gram matrices, nuclear norm, entropy and softmax.
//!
//! Everything here is pure. Matrices are `ndarray` row-major with samples on
//! rows; Cholesky goes through `nalgebra`, SVD is a one-sided Jacobi sweep.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the adaptation problem a batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// n×d bottleneck features of one domain batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
    domain: Domain,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>, domain: Domain) -> Result<Self> {
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(Error::DegenerateInput(format!(
                "feature matrix must be at least 1x1, got {n}x{d}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix entry".into()));
        }
        Ok(Self { data, domain })
    }

    pub fn source(data: Array2<f64>) -> Result<Self> {
        Self::new(data, Domain::Source)
    }

    pub fn target(data: Array2<f64>) -> Result<Self> {
        Self::new(data, Domain::Target)
    }

    /// Builds from nested rows; convenient in tests and small tools.
    pub fn from_rows(rows: &[Vec<f64>], domain: Domain) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch("ragged feature rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((n, d), flat)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(data, domain)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// d×d symmetric covariance estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix(pub Array2<f64>);

impl CovarianceMatrix {
    pub fn data(&self) -> &Array2<f64> {
        &self.0
    }
}

/// B×C matrix whose rows lie on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    data: Array2<f64>,
}

const ROW_SUM_TOL: f64 = 1e-6;

impl ProbabilityMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (b, c) = data.dim();
        if b == 0 || c == 0 {
            return Err(Error::InvalidProbabilities(format!("empty {b}x{c} matrix")));
        }
        for (i, row) in data.rows().into_iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                return Err(Error::InvalidProbabilities(format!(
                    "row {i} has an entry outside [0, 1]"
                )));
            }
            let s = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidProbabilities(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { data })
    }

    pub fn from_logits(logits: &Array2<f64>) -> Result<Self> {
        Self::new(softmax(logits))
    }

    /// One-hot encoding of integer labels.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidProbabilities(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut data = Array2::zeros((labels.len(), classes));
        for (i, &y) in labels.iter().enumerate() {
            data[[i, y]] = 1.0;
        }
        Self::new(data)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.data.ncols()
    }

    /// Arg-max class per row (first index wins ties).
    pub fn argmax(&self) -> Vec<usize> {
        self.data.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    GaussianMulti,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum Bandwidth {
    MedianHeuristic,
    Fixed(f64),
}

/// Kernel family plus bandwidth rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: Bandwidth,
    /// Multiplicative factors applied to the base bandwidth.
    pub ladder: Vec<f64>,
}

pub const DEFAULT_LADDER: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            kind: KernelKind::GaussianMulti,
            bandwidth: Bandwidth::MedianHeuristic,
            ladder: DEFAULT_LADDER.to_vec(),
        }
    }
}

impl KernelSpec {
    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            bandwidth: Bandwidth::Fixed(1.0),
            ladder: vec![1.0],
        }
    }

    /// Single Gaussian kernel with a fixed bandwidth.
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            kind: KernelKind::GaussianMulti,
            bandwidth: Bandwidth::Fixed(sigma),
            ladder: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ladder.is_empty() {
            return Err(Error::config("kernel.ladder", "must not be empty"));
        }
        if self.ladder.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(Error::config("kernel.ladder", "factors must be positive"));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::config("kernel.bandwidth", "fixed bandwidth must be > 0"));
            }
        }
        Ok(())
    }

    /// Fixes the data-dependent bandwidth against the concatenation of `x` and `y`.
    pub fn resolve(&self, x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<ResolvedKernel> {
        self.validate()?;
        if x.ncols() != y.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "kernel inputs have {} and {} columns",
                x.ncols(),
                y.ncols()
            )));
        }
        Ok(match self.kind {
            KernelKind::Linear => ResolvedKernel::Linear,
            KernelKind::GaussianMulti => {
                let base = match self.bandwidth {
                    Bandwidth::Fixed(s) => s,
                    Bandwidth::MedianHeuristic => median_bandwidth(x, y),
                };
                ResolvedKernel::Gaussian {
                    sigmas: self.ladder.iter().map(|f| base * f).collect(),
                }
            }
        })
    }
}

/// Square root of the median pairwise squared distance over the pooled
/// rows; 1.0 when every point coincides.
pub fn median_bandwidth(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> f64 {
    let pooled: Vec<_> = x.rows().into_iter().chain(y.rows()).collect();
    let mut d2 = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            d2.push(sq_dist(pooled[i].iter(), pooled[j].iter()));
        }
    }
    if d2.is_empty() {
        return 1.0;
    }
    d2.sort_by(f64::total_cmp);
    let m = d2.len();
    let med = if m % 2 == 1 {
        d2[m / 2]
    } else {
        0.5 * (d2[m / 2 - 1] + d2[m / 2])
    };
    if med > 1e-12 {
        med.sqrt()
    } else {
        1.0
    }
}

/// A kernel with all data-dependent choices frozen.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedKernel {
    Linear,
    Gaussian { sigmas: Vec<f64> },
}

impl ResolvedKernel {
    pub fn eval<'a>(
        &self,
        a: impl Iterator<Item = &'a f64> + Clone,
        b: impl Iterator<Item = &'a f64> + Clone,
    ) -> f64 {
        match self {
            ResolvedKernel::Linear => a.zip(b).map(|(x, y)| x * y).sum(),
            ResolvedKernel::Gaussian { sigmas } => {
                let d2 = sq_dist(a, b);
                sigmas.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum()
            }
        }
    }

    pub fn matrix(&self, x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Array2<f64> {
        let mut k = Array2::zeros((x.nrows(), y.nrows()));
        for (i, xi) in x.rows().into_iter().enumerate() {
            for (j, yj) in y.rows().into_iter().enumerate() {
                k[[i, j]] = self.eval(xi.iter(), yj.iter());
            }
        }
        k
    }
}

fn sq_dist<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased feature covariance `(DᵀD − (1ᵀD)ᵀ(1ᵀD)/n) / (n − 1)`.
pub fn covariance(features: &FeatureMatrix) -> Result<CovarianceMatrix> {
    covariance_of(&features.data().view()).map(CovarianceMatrix)
}

pub(crate) fn covariance_of(d: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = d.nrows();
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "covariance needs at least 2 rows, got {n}"
        )));
    }
    let col_sum = d.sum_axis(Axis(0));
    let outer = col_sum
        .view()
        .insert_axis(Axis(1))
        .dot(&col_sum.view().insert_axis(Axis(0)));
    let mut c = d.t().dot(d) - outer / n as f64;
    c /= (n - 1) as f64;
    // symmetrise away round-off
    let ct = c.t().to_owned();
    Ok((c + ct) * 0.5)
}

/// Gram matrix between rows of `x` and `y`.
pub fn kernel_matrix(x: &FeatureMatrix, y: &FeatureMatrix, kernel: &KernelSpec) -> Result<Array2<f64>> {
    let (xv, yv) = (x.data().view(), y.data().view());
    let resolved = kernel.resolve(&xv, &yv)?;
    Ok(resolved.matrix(&xv, &yv))
}

pub(crate) fn to_nalgebra(m: &ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Thin SVD `M = U diag(s) Vᵀ` with singular values in descending order.
/// Columns of `U` belonging to zero singular values are zero.
pub struct ThinSvd {
    pub u: Array2<f64>,
    pub singular_values: Array1<f64>,
    pub v_t: Array2<f64>,
}

/// One-sided Jacobi SVD. Iterates column rotations until every column pair
/// is orthogonal to working precision.
pub fn thin_svd(m: &ArrayView2<f64>) -> Result<ThinSvd> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to SVD".into()));
    }
    if m.nrows() < m.ncols() {
        let t = thin_svd(&m.t())?;
        return Ok(ThinSvd {
            u: t.v_t.reversed_axes(),
            singular_values: t.singular_values,
            v_t: t.u.reversed_axes(),
        });
    }
    let n = m.ncols();
    let mut a = m.to_owned();
    let mut v = Array2::<f64>::eye(n);
    const MAX_SWEEPS: usize = 100;
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        converged = true;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (ap, aq) = (a.column(p), a.column(q));
                let alpha = ap.dot(&ap);
                let beta = aq.dot(&aq);
                let gamma = ap.dot(&aq);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!("Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")));
    }
    let norms: Vec<f64> = a.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut u = Array2::zeros((m.nrows(), n));
    let mut v_t = Array2::zeros((n, n));
    let mut singular_values = Array1::zeros(n);
    for (k, &j) in order.iter().enumerate() {
        singular_values[k] = norms[j];
        if norms[j] > 0.0 {
            u.column_mut(k).assign(&(&a.column(j) / norms[j]));
        }
        v_t.row_mut(k).assign(&v.column(j));
    }
    Ok(ThinSvd { u, singular_values, v_t })
}

fn rotate_columns(m: &mut Array2<f64>, p: usize, q: usize, c: f64, s: f64) {
    for mut row in m.rows_mut() {
        let (x, y) = (row[p], row[q]);
        row[p] = c * x - s * y;
        row[q] = s * x + c * y;
    }
}

/// Sum of singular values.
pub fn nuclear_norm(m: &ArrayView2<f64>) -> Result<f64> {
    Ok(thin_svd(m)?.singular_values.sum())
}

/// Nuclear norm together with its (sub)gradient `U Vᵀ`, restricted to the
/// numerically non-zero singular directions.
pub fn nuclear_norm_with_grad(m: &ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let svd = thin_svd(m)?;
    let s = &svd.singular_values;
    let top = s.iter().copied().fold(0.0, f64::max);
    let tol = top * 1e-12 * (m.nrows().max(m.ncols()) as f64);
    let mut grad = Array2::zeros(m.dim());
    for (k, &sk) in s.iter().enumerate() {
        if sk > tol {
            let uk = svd.u.column(k);
            let vk = svd.v_t.row(k);
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    grad[[i, j]] += uk[i] * vk[j];
                }
            }
        }
    }
    Ok((s.sum(), grad))
}

/// Per-row Shannon entropy in nats, with `0·log 0 = 0`.
pub fn row_entropy(p: &ProbabilityMatrix) -> Array1<f64> {
    p.data().rows().into_iter().map(|r| entropy(r.iter().copied())).collect()
}

pub(crate) fn entropy(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Row-wise softmax, shifted by the row max.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Pulls a gradient on softmax outputs back to the logits.
pub fn softmax_backward(p: &Array2<f64>, grad_p: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.dim());
    for ((mut o, pr), gr) in out.rows_mut().into_iter().zip(p.rows()).zip(grad_p.rows()) {
        let dot: f64 = pr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        for ((oi, &pi), &gi) in o.iter_mut().zip(pr.iter()).zip(gr.iter()) {
            *oi = pi * (gi - dot);
        }
    }
    out
}
