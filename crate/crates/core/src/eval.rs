//! Accuracy-family metrics, the proxy A-distance, and feature dumps.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::numerics::{argmax, Domain, FeatureMatrix};

fn check_pair(y_true: &[usize], y_pred: &[usize]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Empty("label vectors".into()));
    }
    Ok(())
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y_true.len() as f64)
}

/// Mean recall over the classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    let present: BTreeSet<usize> = y_true.iter().copied().collect();
    let total: f64 = present
        .iter()
        .map(|&c| {
            let support = y_true.iter().filter(|&&y| y == c).count();
            let hits = y_true.iter().zip(y_pred).filter(|&(&t, &p)| t == c && p == c).count();
            hits as f64 / support as f64
        })
        .sum();
    Ok(total / present.len() as f64)
}

/// Unweighted mean F1 over classes that occur in `y_true` or `y_pred`.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    let classes: BTreeSet<usize> = y_true.iter().chain(y_pred).copied().collect();
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut fn_ = 0usize;
            for (&t, &p) in y_true.iter().zip(y_pred) {
                match (t == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / classes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub n: usize,
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
}

pub fn evaluate(y_true: &[usize], y_pred: &[usize]) -> Result<EvaluationRecord> {
    Ok(EvaluationRecord {
        n: y_true.len(),
        accuracy: accuracy(y_true, y_pred)?,
        balanced_accuracy: balanced_accuracy(y_true, y_pred)?,
        macro_f1: macro_f1(y_true, y_pred)?,
        y_true: y_true.to_vec(),
        y_pred: y_pred.to_vec(),
    })
}

/// Eval-mode predictions and features for a whole set, computed in chunks.
pub fn predict_set(model: &mut ModelBundle, set: &LabeledSet, chunk: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    let chunk = chunk.max(1);
    let mut features = Array2::zeros((set.len(), model.feature_width()));
    let mut preds = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for (c, block) in idx.chunks(chunk).enumerate() {
        let x = set.inputs.batch(block, crate::nn::Mode::Eval, 0)?;
        let (f, logits) = model.predict(&x)?;
        features.slice_mut(s![c * chunk..c * chunk + block.len(), ..]).assign(&f);
        preds.extend(logits.rows().into_iter().map(|r| argmax(r.iter().copied())));
    }
    Ok((features, preds))
}

/// Ridge-regularised logistic regression fitted by Newton's method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSpec {
    /// L2 penalty on the weights; the intercept gets only a 1e-8 stabiliser.
    pub ridge: f64,
    pub max_iter: usize,
    pub tolerance: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            ridge: 1.0,
            max_iter: 100,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ADistanceEstimate {
    pub value: f64,
    pub probe_error: f64,
    pub probe: ProbeSpec,
    pub split_seed: u64,
}

impl ADistanceEstimate {
    /// `2(1 − 2·err)` with `err` clamped to `[0, 0.5]`.
    pub fn from_error(probe_error: f64, probe: ProbeSpec, split_seed: u64) -> Self {
        let e = probe_error.clamp(0.0, 0.5);
        Self {
            value: 2.0 * (1.0 - 2.0 * e),
            probe_error: e,
            probe,
            split_seed,
        }
    }
}

pub const A_DISTANCE_MIN_SAMPLES: usize = 20;

pub fn a_distance(fs: &FeatureMatrix, ft: &FeatureMatrix, seed: u64) -> Result<ADistanceEstimate> {
    a_distance_with(fs, ft, seed, &ProbeSpec::default())
}

/// Source rows are labelled 1 and target rows 0; each domain is split 50/50
/// into probe-train and held-out halves.
pub fn a_distance_with(fs: &FeatureMatrix, ft: &FeatureMatrix, seed: u64, probe: &ProbeSpec) -> Result<ADistanceEstimate> {
    for f in [fs, ft] {
        if f.rows() < A_DISTANCE_MIN_SAMPLES {
            return Err(Error::InsufficientSamples {
                needed: A_DISTANCE_MIN_SAMPLES,
                got: f.rows(),
            });
        }
    }
    if fs.dim() != ft.dim() {
        return Err(Error::ShapeMismatch(format!("feature dims {} vs {}", fs.dim(), ft.dim())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (f, z) in [(fs, 1.0), (ft, 0.0)] {
        let mut idx: Vec<usize> = (0..f.rows()).collect();
        idx.shuffle(&mut rng);
        let half = f.rows() / 2;
        for (k, &i) in idx.iter().enumerate() {
            let row = (f.data().row(i).to_owned(), z);
            if k < half {
                train.push(row);
            } else {
                test.push(row);
            }
        }
    }
    let d = fs.dim();
    let stack = |rows: &[(ndarray::Array1<f64>, f64)]| {
        let mut x = Array2::zeros((rows.len(), d));
        for (i, (r, _)) in rows.iter().enumerate() {
            x.row_mut(i).assign(r);
        }
        (x, rows.iter().map(|(_, z)| *z).collect::<Vec<f64>>())
    };
    let (mut x_train, z_train) = stack(&train);
    let (mut x_test, z_test) = stack(&test);
    let mean = x_train.mean_axis(Axis(0)).expect("non-empty");
    let std = x_train.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    for x in [&mut x_train, &mut x_test] {
        *x -= &mean;
        *x /= &std;
    }
    let w = fit_logistic(&x_train, &z_train, probe)?;
    let wrong = x_test
        .rows()
        .into_iter()
        .zip(&z_test)
        .filter(|(r, &z)| {
            let score = r.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>() + w[d];
            (score > 0.0) != (z > 0.5)
        })
        .count();
    Ok(ADistanceEstimate::from_error(
        wrong as f64 / z_test.len() as f64,
        probe.clone(),
        seed,
    ))
}

/// Returns weights followed by the intercept.
fn fit_logistic(x: &Array2<f64>, z: &[f64], probe: &ProbeSpec) -> Result<Vec<f64>> {
    let (n, d) = x.dim();
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[[i, j]] } else { 1.0 });
    let targets = DVector::from_column_slice(z);
    let mut w = DVector::<f64>::zeros(d + 1);
    let mut penalty = DMatrix::<f64>::identity(d + 1, d + 1) * probe.ridge;
    penalty[(d, d)] = 1e-8;
    for _ in 0..probe.max_iter {
        let scores = &design * &w;
        let p = scores.map(crate::nn::sigmoid);
        let grad = design.transpose() * (&p - &targets) + &penalty * &w;
        let weights = p.map(|v| (v * (1.0 - v)).max(1e-12));
        let weighted = DMatrix::from_fn(n, d + 1, |i, j| design[(i, j)] * weights[i]);
        let hessian = design.transpose() * weighted + &penalty;
        let step = hessian
            .cholesky()
            .ok_or_else(|| Error::Numeric("probe Hessian is not positive definite".into()))?
            .solve(&grad);
        w -= &step;
        if step.norm() <= probe.tolerance * (1.0 + w.norm()) {
            break;
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe weights".into()));
    }
    Ok(w.iter().copied().collect())
}

/// Flat columnar dump: `domain label f0 f1 …`, one sample per line.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub domains: Vec<Domain>,
    pub labels: Vec<usize>,
    pub features: Array2<f64>,
}

fn domain_name(d: Domain) -> &'static str {
    match d {
        Domain::Source => "source",
        Domain::Target => "target",
    }
}

impl FeatureDump {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let mut header = String::from("domain label");
        for j in 0..self.features.ncols() {
            header.push_str(&format!(" f{j}"));
        }
        writeln!(out, "{header}")?;
        for (i, row) in self.features.rows().into_iter().enumerate() {
            write!(out, "{} {}", domain_name(self.domains[i]), self.labels[i])?;
            for v in row {
                write!(out, " {v:.8e}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header = lines.next().ok_or_else(|| Error::Parse("feature dump is empty".into()))??;
        let cols: Vec<&str> = header.split_whitespace().collect();
        if cols.len() < 2 || cols[0] != "domain" || cols[1] != "label" {
            return Err(Error::Parse(format!("unexpected feature dump header `{header}`")));
        }
        let d = cols.len() - 2;
        let mut domains = Vec::new();
        let mut labels = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: &str| Error::Parse(format!("feature dump line {}: {msg}", lineno + 2));
            if fields.len() != d + 2 {
                return Err(bad(&format!("expected {} columns, found {}", d + 2, fields.len())));
            }
            domains.push(match fields[0] {
                "source" => Domain::Source,
                "target" => Domain::Target,
                other => return Err(bad(&format!("unknown domain `{other}`"))),
            });
            labels.push(fields[1].parse().map_err(|_| bad("label is not an integer"))?);
            for f in &fields[2..] {
                values.push(f.parse::<f64>().map_err(|_| bad("feature is not a number"))?);
            }
        }
        let n = labels.len();
        Ok(Self {
            domains,
            labels,
            features: Array2::from_shape_vec((n, d), values).expect("row widths checked"),
        })
    }

    /// Rows of one domain as a labelled set.
    pub fn domain_set(&self, domain: Domain, classes: Option<usize>) -> Result<LabeledSet> {
        let idx: Vec<usize> = (0..self.labels.len()).filter(|&i| self.domains[i] == domain).collect();
        if idx.is_empty() {
            return Err(Error::Empty(format!("no {} rows in feature dump", domain_name(domain))));
        }
        let classes = classes.unwrap_or_else(|| self.labels.iter().max().map_or(1, |m| m + 1));
        LabeledSet::from_array(
            self.features.select(Axis(0), &idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            classes,
        )
    }
}

/// Eval-mode bottleneck features of each set, tagged with its domain.
pub fn export_features(model: &mut ModelBundle, sets: &[(Domain, &LabeledSet)], path: &Path) -> Result<FeatureDump> {
    let mut domains = Vec::new();
    let mut labels = Vec::new();
    let mut blocks = Vec::new();
    for (domain, set) in sets {
        let (f, _) = predict_set(model, set, 256)?;
        domains.extend(std::iter::repeat_n(*domain, set.len()));
        labels.extend_from_slice(&set.labels);
        blocks.push(f);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let features = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let dump = FeatureDump {
        domains,
        labels,
        features,
    };
    dump.write(path)?;
    Ok(dump)
}
