//! Test-side reference implementations. None of these call into the crate's
//! numerics, so agreement with the library is evidence rather than tautology.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-scale..scale))
}

/// Rows drawn from a Dirichlet(1,…,1)-like simplex sample, strictly positive.
pub fn simplex_rows(r: &mut ChaCha8Rng, rows: usize, classes: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, classes), |_| -r.random_range(1e-3f64..1.0).ln());
    for mut row in m.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    m
}

pub fn random_labels(r: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut m = Array2::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        m[[i, y]] = 1.0;
    }
    m
}

/// Sum of Gaussian kernels over the given bandwidths.
pub fn gaussian_sum(a: &[f64], b: &[f64], sigmas: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    sigmas.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum()
}

/// Column-normalised class weights; zero columns stay zero.
pub fn class_weights(y: &Array2<f64>) -> Vec<Vec<f64>> {
    let (n, c) = y.dim();
    (0..c)
        .map(|k| {
            let mass: f64 = (0..n).map(|i| y[[i, k]]).sum();
            (0..n).map(|i| if mass > 0.0 { y[[i, k]] / mass } else { 0.0 }).collect()
        })
        .collect()
}

/// The kernelised subdomain discrepancy written as three literal double sums
/// per class, averaged over classes carrying weight in both domains.
pub fn lmmd_brute(xs: &Array2<f64>, xt: &Array2<f64>, ys: &Array2<f64>, yt: &Array2<f64>, sigmas: &[f64]) -> f64 {
    let ws = class_weights(ys);
    let wt = class_weights(yt);
    let (ns, nt) = (xs.nrows(), xt.nrows());
    let row = |m: &Array2<f64>, i: usize| m.row(i).to_vec();
    let mut total = 0.0;
    let mut active = 0;
    for c in 0..ws.len() {
        if ws[c].iter().sum::<f64>() == 0.0 || wt[c].iter().sum::<f64>() == 0.0 {
            continue;
        }
        active += 1;
        let mut term = 0.0;
        for i in 0..ns {
            for j in 0..ns {
                term += ws[c][i] * ws[c][j] * gaussian_sum(&row(xs, i), &row(xs, j), sigmas);
            }
        }
        for i in 0..nt {
            for j in 0..nt {
                term += wt[c][i] * wt[c][j] * gaussian_sum(&row(xt, i), &row(xt, j), sigmas);
            }
        }
        for i in 0..ns {
            for j in 0..nt {
                term -= 2.0 * ws[c][i] * wt[c][j] * gaussian_sum(&row(xs, i), &row(xt, j), sigmas);
            }
        }
        total += term;
    }
    if active == 0 {
        0.0
    } else {
        total / active as f64
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _ in 0..200 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[[i, j]].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[[i, i]]).collect()
}

/// ‖M‖_* as the sum of square roots of the eigenvalues of the smaller Gram
/// matrix (the larger one only adds zero eigenvalues, whose roundoff the
/// square root would amplify).
pub fn nuclear_oracle(m: &Array2<f64>) -> f64 {
    let gram = if m.nrows() <= m.ncols() { m.dot(&m.t()) } else { m.t().dot(m) };
    jacobi_eigenvalues(&gram).iter().map(|e| e.max(0.0).sqrt()).sum()
}

pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = xp[idx];
        xp[idx] = orig + h;
        let up = f(&xp);
        xp[idx] = orig - h;
        let down = f(&xp);
        xp[idx] = orig;
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor).
pub fn rel_err(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt()).max(floor);
    diff / scale
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
