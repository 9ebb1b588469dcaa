use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix_seed, DatasetManifest, InputSource, OodTransform};
use crate::error::{Error, Result};
use crate::nn::Mode;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Per-channel z-score constants on the `[0, 1]` pixel scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Normalization {
    /// Computed over the training split before the run; see [`compute_normalization`].
    #[default]
    Auto,
    ImageNet,
    Fixed { mean: [f64; 3], std: [f64; 3] },
}

impl Normalization {
    pub fn mean_std(&self) -> Result<([f64; 3], [f64; 3])> {
        let (mean, std) = match self {
            Normalization::Auto => {
                return Err(Error::config(
                    "preprocess.normalization",
                    "automatic normalization must be resolved against the training split first",
                ))
            }
            Normalization::ImageNet => (IMAGENET_MEAN, IMAGENET_STD),
            Normalization::Fixed { mean, std } => (*mean, *std),
        };
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("preprocess.normalization", "std must be > 0 per channel"));
        }
        Ok((mean, std))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSpec {
    pub resize_to: u32,
    pub crop: u32,
    /// Horizontal flip probability in train mode; eval never flips.
    pub hflip_prob: f64,
    pub normalization: Normalization,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            resize_to: 256,
            crop: 224,
            hflip_prob: 0.5,
            normalization: Normalization::Auto,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize_to {
            return Err(Error::config("preprocess.crop", "must be in 1..=resize_to"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("preprocess.hflip_prob", "must be a probability"));
        }
        Ok(())
    }

    /// Flattened CHW width of one preprocessed sample.
    pub fn sample_dim(&self) -> usize {
        3 * (self.crop as usize).pow(2)
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path).map(|i| i.to_rgb8()).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Resize, crop and optionally flip; returns HWC pixels on the `[0, 255]` scale.
fn geometric(img: &RgbImage, spec: &PreprocessSpec, mode: Mode, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let r = spec.resize_to;
    let resized = imageops::resize(img, r, r, FilterType::Triangle);
    let slack = r - spec.crop;
    let (top, left, flip) = match mode {
        Mode::Train => (
            rng.random_range(0..=slack),
            rng.random_range(0..=slack),
            rng.random::<f64>() < spec.hflip_prob,
        ),
        Mode::Eval => (slack / 2, slack / 2, false),
    };
    let c = spec.crop as usize;
    Array3::from_shape_fn((c, c, 3), |(y, x, ch)| {
        let sx = if flip { c - 1 - x } else { x };
        resized.get_pixel(left + sx as u32, top + y as u32)[ch] as f64
    })
}

fn normalize(pixels: &mut Array3<f64>, mean: &[f64; 3], std: &[f64; 3]) {
    for ((_, _, ch), v) in pixels.indexed_iter_mut() {
        *v = (*v / 255.0 - mean[ch]) / std[ch];
    }
}

/// Train mode: resize → random crop → random horizontal flip → z-score.
/// Eval mode: resize → center crop → z-score. Output is HWC.
pub fn preprocess(img: &RgbImage, spec: &PreprocessSpec, mode: Mode, seed: u64) -> Result<Array3<f64>> {
    preprocess_with(img, spec, mode, seed, None)
}

pub(crate) fn preprocess_with(
    img: &RgbImage,
    spec: &PreprocessSpec,
    mode: Mode,
    seed: u64,
    ood: Option<&OodTransform>,
) -> Result<Array3<f64>> {
    spec.validate()?;
    let (mean, std) = spec.normalization.mean_std()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = geometric(img, spec, mode, &mut rng);
    if let Some(t) = ood {
        pixels = t.apply(&pixels, &mut rng);
    }
    normalize(&mut pixels, &mean, &std);
    Ok(pixels)
}

/// Per-channel mean and std of eval-path pixels over a manifest.
pub fn compute_normalization(manifest: &DatasetManifest, spec: &PreprocessSpec) -> Result<Normalization> {
    spec.validate()?;
    if manifest.is_empty() {
        return Err(Error::Empty("normalization statistics need at least one image".into()));
    }
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut count = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..manifest.len() {
        let px = geometric(&load_rgb(&manifest.absolute_path(i))?, spec, Mode::Eval, &mut rng);
        for ((_, _, ch), v) in px.indexed_iter() {
            let v = v / 255.0;
            sum[ch] += v;
            sq[ch] += v * v;
        }
        count += (px.len() / 3) as f64;
    }
    let mean = sum.map(|s| s / count);
    let mut std = [0.0; 3];
    for ch in 0..3 {
        std[ch] = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0).sqrt();
    }
    if std.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::DegenerateInput("a colour channel is constant across the training split".into()));
    }
    Ok(Normalization::Fixed { mean, std })
}

/// Images decoded and preprocessed on demand, flattened channel-major.
#[derive(Debug, Clone)]
pub struct ImageSource {
    pub manifest: DatasetManifest,
    pub spec: PreprocessSpec,
    pub ood: Option<OodTransform>,
}

impl ImageSource {
    pub fn new(manifest: DatasetManifest, spec: PreprocessSpec) -> Result<Self> {
        spec.validate()?;
        spec.normalization.mean_std()?;
        Ok(Self {
            manifest,
            spec,
            ood: None,
        })
    }
}

impl InputSource for ImageSource {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn dim(&self) -> usize {
        self.spec.sample_dim()
    }

    fn batch(&self, indices: &[usize], mode: Mode, seed: u64) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (row, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::ShapeMismatch(format!("sample index {i} out of range for {} images", self.len())));
            }
            let img = load_rgb(&self.manifest.absolute_path(i))?;
            let hwc = preprocess_with(&img, &self.spec, mode, mix_seed(seed, i as u64), self.ood.as_ref())?;
            let chw = hwc.permuted_axes([2, 0, 1]);
            for (dst, src) in out.index_axis_mut(Axis(0), row).iter_mut().zip(chw.iter()) {
                *dst = *src;
            }
        }
        Ok(out)
    }
}
