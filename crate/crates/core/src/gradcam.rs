//! Class-activation heat maps from convolutional activations.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::model::ModelBundle;

/// Heat map with values in `[0, 1]`; the maximum is 1 unless the map is all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub data: Array2<f64>,
    pub source_layer: String,
}

impl HeatMap {
    pub fn new(data: Array2<f64>, source_layer: &str) -> Self {
        Self {
            data,
            source_layer: source_layer.to_string(),
        }
    }

    /// Bilinear resize with aligned corners.
    pub fn upsample(&self, height: usize, width: usize) -> HeatMap {
        let (h, w) = self.data.dim();
        let scale = |dst: usize, src: usize| if dst > 1 { (src as f64 - 1.0) / (dst as f64 - 1.0) } else { 0.0 };
        let (sy, sx) = (scale(height, h), scale(width, w));
        let up = Array2::from_shape_fn((height, width), |(i, j)| {
            let y = i as f64 * sy;
            let x = j as f64 * sx;
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let top = self.data[[y0, x0]] * (1.0 - fx) + self.data[[y0, x1]] * fx;
            let bottom = self.data[[y1, x0]] * (1.0 - fx) + self.data[[y1, x1]] * fx;
            top * (1.0 - fy) + bottom * fy
        });
        HeatMap::new(up, &self.source_layer)
    }

    /// Grayscale PNG, 0 → black and 1 → white.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.data.dim();
        let pixels: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches dimensions");
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Channel weights are the spatial means of the gradient; the map is the
/// rectified weighted channel sum, min-max normalised. A map with no
/// positive evidence is all zeros; a constant positive map is all ones.
pub fn grad_cam_from_activations(activations: &Array3<f64>, gradients: &Array3<f64>, layer: &str) -> Result<HeatMap> {
    if activations.dim() != gradients.dim() {
        return Err(Error::ShapeMismatch(format!(
            "activations {:?} vs gradients {:?}",
            activations.dim(),
            gradients.dim()
        )));
    }
    let (k, h, w) = activations.dim();
    if k == 0 || h == 0 || w == 0 {
        return Err(Error::Empty("activation map".into()));
    }
    let mut map = Array2::<f64>::zeros((h, w));
    for (a, g) in activations.axis_iter(Axis(0)).zip(gradients.axis_iter(Axis(0))) {
        let weight = g.mean().expect("non-empty");
        map.scaled_add(weight, &a);
    }
    map.mapv_inplace(|v| v.max(0.0));
    let max = map.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let min = map.fold(f64::INFINITY, |m, &v| m.min(v));
    if !max.is_finite() || !min.is_finite() {
        return Err(Error::NonFinite("activation map".into()));
    }
    if max <= 0.0 {
        return Ok(HeatMap::new(Array2::zeros((h, w)), layer));
    }
    if max - min <= f64::EPSILON * max {
        return Ok(HeatMap::new(Array2::ones((h, w)), layer));
    }
    Ok(HeatMap::new(map.mapv(|v| (v - min) / (max - min)), layer))
}

/// Heat map for `class` at a named convolutional layer of a toy-cnn model.
pub fn grad_cam(model: &mut ModelBundle, sample: &Array2<f64>, class: usize, layer: &str) -> Result<HeatMap> {
    let (acts, grads) = model.activation_gradients(sample, class, layer)?;
    grad_cam_from_activations(&acts, &grads, layer)
}
