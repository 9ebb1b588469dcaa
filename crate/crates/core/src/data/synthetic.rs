use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LabeledSet;
use crate::error::{Error, Result};

/// Labelled 2-D Gaussian blobs and a shifted copy.
///
/// The target is the source point set mapped through
/// `x ↦ scale·R(rotation)·x + translation` plus isotropic noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticShiftSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    /// One centre per class; empty selects the built-in layout.
    pub centers: Vec<[f64; 2]>,
    /// One covariance per class; empty means `spread²·I` for every class.
    pub covariances: Vec<[[f64; 2]; 2]>,
    pub spread: f64,
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    pub scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticShiftSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            samples_per_class: 300,
            centers: Vec::new(),
            covariances: Vec::new(),
            spread: 0.5,
            rotation_deg: 45.0,
            translation: [0.0, 0.0],
            scale: 1.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticShiftSpec {
    /// Centres on a circle of radius 3 spanning `[0°, 90·(C−1)°]` in 90° steps
    /// (wrapping past four classes). Neighbouring classes sit 90° apart, so a
    /// 45° rotation puts the shifted blobs on the source decision boundaries.
    pub fn layout(&self) -> Vec<[f64; 2]> {
        if !self.centers.is_empty() {
            return self.centers.clone();
        }
        (0..self.classes)
            .map(|c| {
                let turns = c / 4;
                let radius = 3.0 * (1 + turns) as f64;
                let angle = (c % 4) as f64 * std::f64::consts::FRAC_PI_2;
                [radius * angle.cos(), radius * angle.sin()]
            })
            .collect()
    }

    fn covariance(&self, c: usize) -> [[f64; 2]; 2] {
        self.covariances
            .get(c)
            .copied()
            .unwrap_or([[self.spread * self.spread, 0.0], [0.0, self.spread * self.spread]])
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.samples_per_class == 0 {
            return Err(Error::config("synthetic", "classes and samples_per_class must be >= 1"));
        }
        if !self.centers.is_empty() && self.centers.len() != self.classes {
            return Err(Error::config("synthetic.centers", "need one centre per class"));
        }
        if !self.covariances.is_empty() && self.covariances.len() != self.classes {
            return Err(Error::config("synthetic.covariances", "need one covariance per class"));
        }
        if !(self.noise >= 0.0) || !(self.scale > 0.0) {
            return Err(Error::config("synthetic", "noise must be >= 0 and scale > 0"));
        }
        Ok(())
    }
}

/// Lower Cholesky factor of a 2×2 covariance.
fn cholesky2(c: [[f64; 2]; 2], class: usize) -> Result<[[f64; 2]; 2]> {
    let symmetric = (c[0][1] - c[1][0]).abs() <= 1e-12 * c[0][1].abs().max(1.0);
    let l00 = c[0][0].sqrt();
    let l10 = if l00 > 0.0 { c[1][0] / l00 } else { f64::NAN };
    let rest = c[1][1] - l10 * l10;
    if !symmetric || !(c[0][0] > 0.0) || !(rest > 0.0) {
        return Err(Error::DegenerateInput(format!(
            "covariance of class {class} is not symmetric positive definite: {c:?}"
        )));
    }
    Ok([[l00, 0.0], [l10, rest.sqrt()]])
}

pub fn gen_synthetic_domains(spec: &SyntheticShiftSpec) -> Result<(LabeledSet, LabeledSet)> {
    spec.validate()?;
    let centers = spec.layout();
    let n = spec.classes * spec.samples_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut src = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        let l = cholesky2(spec.covariance(c), c)?;
        for k in 0..spec.samples_per_class {
            let (z0, z1): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            let row = c * spec.samples_per_class + k;
            src[[row, 0]] = centers[c][0] + l[0][0] * z0;
            src[[row, 1]] = centers[c][1] + l[1][0] * z0 + l[1][1] * z1;
            labels.push(c);
        }
    }
    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    let mut tgt = Array2::zeros((n, 2));
    for i in 0..n {
        let (x, y) = (src[[i, 0]], src[[i, 1]]);
        tgt[[i, 0]] = spec.scale * (cos * x - sin * y) + spec.translation[0];
        tgt[[i, 1]] = spec.scale * (sin * x + cos * y) + spec.translation[1];
    }
    if spec.noise > 0.0 {
        for v in tgt.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise * z;
        }
    }
    Ok((
        LabeledSet::from_array(src, labels.clone(), spec.classes)?,
        LabeledSet::from_array(tgt, labels, spec.classes)?,
    ))
}
