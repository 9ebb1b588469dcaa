//! Dataset ingestion, preprocessing, out-of-distribution transforms, stream
//! partitions and synthetic shift generation.
//!
//! Inputs and labels are kept apart: training code receives target data as a
//! bare [`InputSource`], so target labels cannot reach any loss.

mod manifest;
mod ood;
mod preprocess;
mod stream;
mod synthetic;

use std::sync::Arc;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::nn::Mode;

pub use manifest::{load_image_folder, subsample_indices_per_class, subsample_per_class, DatasetManifest, ManifestEntry};
pub use ood::{apply_ood_transform, BlurSpec, ErasingSpec, OodKind, OodTransform};
pub use preprocess::{
    compute_normalization, load_rgb, preprocess, ImageSource, Normalization, PreprocessSpec, IMAGENET_MEAN, IMAGENET_STD,
};
pub use stream::{split_stream, StreamPlan};
pub use synthetic::{gen_synthetic_domains, SyntheticShiftSpec};

/// Row-producing sample store. Train-mode batches may be randomised, but
/// only through `seed`.
pub trait InputSource: Send + Sync {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn batch(&self, indices: &[usize], mode: Mode, seed: u64) -> Result<Array2<f64>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples held in memory as rows of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSource(pub Array2<f64>);

impl InputSource for TensorSource {
    fn len(&self) -> usize {
        self.0.nrows()
    }

    fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn batch(&self, indices: &[usize], _mode: Mode, _seed: u64) -> Result<Array2<f64>> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.0.nrows()) {
            return Err(Error::ShapeMismatch(format!("sample index {bad} out of range for {} rows", self.0.nrows())));
        }
        Ok(self.0.select(Axis(0), indices))
    }
}

/// A re-indexed view of another source.
pub struct SubsetSource {
    inner: Arc<dyn InputSource>,
    indices: Vec<usize>,
}

impl InputSource for SubsetSource {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn batch(&self, indices: &[usize], mode: Mode, seed: u64) -> Result<Array2<f64>> {
        let mapped = indices
            .iter()
            .map(|&i| {
                self.indices
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::ShapeMismatch(format!("sample index {i} out of range for {} rows", self.indices.len())))
            })
            .collect::<Result<Vec<usize>>>()?;
        self.inner.batch(&mapped, mode, seed)
    }
}

/// Inputs with their class labels. `labels.len() == inputs.len()`.
#[derive(Clone)]
pub struct LabeledSet {
    pub inputs: Arc<dyn InputSource>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl std::fmt::Debug for LabeledSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LabeledSet")
            .field("len", &self.labels.len())
            .field("dim", &self.inputs.dim())
            .field("classes", &self.classes)
            .finish()
    }
}

impl LabeledSet {
    pub fn new(inputs: Arc<dyn InputSource>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::ShapeMismatch(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { inputs, labels, classes })
    }

    pub fn from_array(x: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        Self::new(Arc::new(TensorSource(x)), labels, classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledSet> {
        let labels = indices
            .iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::ShapeMismatch(format!("sample index {i} out of range for {} rows", self.len())))
            })
            .collect::<Result<Vec<usize>>>()?;
        let inputs = SubsetSource {
            inner: Arc::clone(&self.inputs),
            indices: indices.to_vec(),
        };
        LabeledSet::new(Arc::new(inputs), labels, self.classes)
    }

    /// All samples in eval mode.
    pub fn all_inputs(&self) -> Result<Array2<f64>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.inputs.batch(&idx, Mode::Eval, 0)
    }
}

/// SplitMix64 finaliser; derives independent per-sample seeds.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn tensor_source_selects_rows() {
        let s = TensorSource(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(s.batch(&[2, 0], Mode::Train, 9).unwrap(), array![[5.0, 6.0], [1.0, 2.0]]);
        assert!(s.batch(&[3], Mode::Eval, 0).is_err());
    }

    #[test]
    fn labeled_set_checks_lengths() {
        assert!(LabeledSet::from_array(Array2::zeros((2, 1)), vec![0], 1).is_err());
        assert!(LabeledSet::from_array(Array2::zeros((1, 1)), vec![2], 2).is_err());
    }

    #[test]
    fn mixed_seeds_differ() {
        assert_ne!(mix_seed(1, 0), mix_seed(1, 1));
        assert_eq!(mix_seed(7, 3), mix_seed(7, 3));
    }
}
