use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageSource;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodKind {
    RandomFlip,
    RandomInvert,
    GaussianBlur,
    RandomErasing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErasingSpec {
    /// Erased fraction of the image area.
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub fill: f64,
}

impl Default for ErasingSpec {
    fn default() -> Self {
        Self {
            scale: (0.02, 0.33),
            ratio: (0.3, 3.3),
            fill: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlurSpec {
    pub kernel: usize,
    pub sigma: f64,
}

impl Default for BlurSpec {
    fn default() -> Self {
        let kernel = 3;
        Self {
            kernel,
            sigma: 0.3 * ((kernel as f64 - 1.0) / 2.0 - 1.0) + 0.8,
        }
    }
}

/// Exactly one corruption applied to every test sample, on HWC pixels in
/// `[0, 255]`. Flip, invert and erasing fire with probability 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodTransform {
    pub kinds: Vec<OodKind>,
    #[serde(default)]
    pub erasing: ErasingSpec,
    #[serde(default)]
    pub blur: BlurSpec,
}

impl OodTransform {
    pub fn new(kind: OodKind) -> Self {
        Self {
            kinds: vec![kind],
            erasing: ErasingSpec::default(),
            blur: BlurSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.len() != 1 {
            return Err(Error::config(
                "ood.kinds",
                format!("exactly one transform kind per run, got {}", self.kinds.len()),
            ));
        }
        let e = &self.erasing;
        if !(0.0 < e.scale.0 && e.scale.0 <= e.scale.1 && e.scale.1 <= 1.0) {
            return Err(Error::config("ood.erasing.scale", "must satisfy 0 < lo <= hi <= 1"));
        }
        if !(0.0 < e.ratio.0 && e.ratio.0 <= e.ratio.1) {
            return Err(Error::config("ood.erasing.ratio", "must satisfy 0 < lo <= hi"));
        }
        if self.blur.kernel.is_multiple_of(2) || !(self.blur.sigma > 0.0) {
            return Err(Error::config("ood.blur", "kernel must be odd and sigma positive"));
        }
        Ok(())
    }

    pub fn kind(&self) -> OodKind {
        self.kinds[0]
    }

    pub fn apply(&self, img: &Array3<f64>, rng: &mut ChaCha8Rng) -> Array3<f64> {
        match self.kind() {
            OodKind::RandomFlip => flip(img),
            OodKind::RandomInvert => img.mapv(|v| 255.0 - v),
            OodKind::GaussianBlur => blur(img, &self.blur),
            OodKind::RandomErasing => erase(img, &self.erasing, rng),
        }
    }
}

fn flip(img: &Array3<f64>) -> Array3<f64> {
    let w = img.dim().1;
    Array3::from_shape_fn(img.dim(), |(y, x, c)| img[[y, w - 1 - x, c]])
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn blur(img: &Array3<f64>, spec: &BlurSpec) -> Array3<f64> {
    let r = (spec.kernel / 2) as isize;
    let weights: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * spec.sigma * spec.sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let (h, w, _) = img.dim();
    let horizontal = Array3::from_shape_fn(img.dim(), |(y, x, c)| {
        (-r..=r)
            .zip(&weights)
            .map(|(d, k)| k * img[[y, reflect(x as isize + d, w), c]])
            .sum::<f64>()
    });
    Array3::from_shape_fn(img.dim(), |(y, x, c)| {
        (-r..=r)
            .zip(&weights)
            .map(|(d, k)| k * horizontal[[reflect(y as isize + d, h), x, c]])
            .sum::<f64>()
    })
}

fn erase(img: &Array3<f64>, spec: &ErasingSpec, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (h, w, _) = img.dim();
    let area = (h * w) as f64;
    let mut out = img.clone();
    for _ in 0..10 {
        let target = area * rng.random_range(spec.scale.0..=spec.scale.1);
        let aspect = rng.random_range(spec.ratio.0.ln()..=spec.ratio.1.ln()).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        out.slice_mut(ndarray::s![top..top + eh, left..left + ew, ..]).fill(spec.fill);
        return out;
    }
    out
}

/// A view of `source` whose every sample passes through `t`.
pub fn apply_ood_transform(source: &ImageSource, t: &OodTransform) -> Result<ImageSource> {
    t.validate()?;
    Ok(ImageSource {
        ood: Some(t.clone()),
        ..source.clone()
    })
}
