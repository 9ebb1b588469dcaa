//! Backbone → bottleneck → classifier composition.
//!
//! The bottleneck output is the feature tap every adaptation loss attaches to;
//! [`ForwardPass::features`] is exactly what the trainer hands to the losses.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::DomainDiscriminator;
use crate::error::{Error, Result};
use crate::nn::{
    prefixed, relu, relu_backward, BatchNorm1d, BatchNormCache, Conv2d, Linear, Mode, Module, NamedTensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneName {
    ToyMlp,
    ToyCnn,
    #[serde(rename = "residual-34")]
    Residual34,
    #[serde(rename = "residual-50")]
    Residual50,
    #[serde(rename = "densenet-121")]
    Densenet121,
    ExternalFeatureExtractor,
}

impl BackboneName {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneName::ToyMlp => "toy-mlp",
            BackboneName::ToyCnn => "toy-cnn",
            BackboneName::Residual34 => "residual-34",
            BackboneName::Residual50 => "residual-50",
            BackboneName::Densenet121 => "densenet-121",
            BackboneName::ExternalFeatureExtractor => "external-feature-extractor",
        }
    }

    /// Penultimate width of the standard image architectures.
    pub fn canonical_width(&self) -> Option<usize> {
        match self {
            BackboneName::Residual34 => Some(512),
            BackboneName::Residual50 => Some(2048),
            BackboneName::Densenet121 => Some(1024),
            _ => None,
        }
    }
}

impl fmt::Display for BackboneName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub name: BackboneName,
    pub output_dim: usize,
    pub pretrained: bool,
    /// Flattened input width for toy-mlp and precomputed features; 0 takes
    /// it from the data.
    pub input_dim: usize,
    /// Hidden widths of toy-mlp; the last one is the output width.
    pub hidden: Vec<usize>,
    /// (channels, height, width) for toy-cnn.
    pub input_shape: [usize; 3],
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            name: BackboneName::ToyMlp,
            output_dim: 64,
            pretrained: false,
            input_dim: 0,
            hidden: vec![64, 64],
            input_shape: [3, 224, 224],
        }
    }
}

impl BackboneSpec {
    pub fn toy_mlp(input_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            name: BackboneName::ToyMlp,
            output_dim: *hidden.last().unwrap_or(&input_dim),
            input_dim,
            hidden,
            ..Default::default()
        }
    }

    pub fn toy_cnn(input_shape: [usize; 3], output_dim: usize) -> Self {
        Self {
            name: BackboneName::ToyCnn,
            output_dim,
            input_shape,
            input_dim: input_shape.iter().product(),
            hidden: Vec::new(),
            pretrained: false,
        }
    }

    /// Copy with data-dependent dimensions filled in: the flattened sample
    /// width, and for image-shaped data its (channels, height, width).
    pub fn fitted_to(&self, sample_dim: usize, image_shape: Option<[usize; 3]>) -> Self {
        let mut s = self.clone();
        if s.input_dim == 0 {
            s.input_dim = sample_dim;
        }
        match s.name {
            BackboneName::ExternalFeatureExtractor => s.output_dim = s.input_dim,
            BackboneName::ToyCnn => {
                if let Some(shape) = image_shape {
                    s.input_shape = shape;
                    s.input_dim = shape.iter().product();
                }
            }
            _ => {}
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 {
            return Err(Error::config("backbone.output_dim", "must be >= 1"));
        }
        match self.name {
            BackboneName::ToyMlp => {
                if self.hidden.is_empty() || self.hidden.contains(&0) {
                    return Err(Error::config("backbone.hidden", "toy-mlp needs positive hidden widths"));
                }
                if self.hidden.last() != Some(&self.output_dim) {
                    return Err(Error::config(
                        "backbone.output_dim",
                        "must equal the last toy-mlp hidden width",
                    ));
                }
                if self.pretrained {
                    return Err(Error::config("backbone.pretrained", "toy backbones have no pretrained weights"));
                }
            }
            BackboneName::ToyCnn => {
                if self.input_shape.contains(&0) {
                    return Err(Error::config("backbone.input_shape", "dimensions must be positive"));
                }
                if self.pretrained {
                    return Err(Error::config("backbone.pretrained", "toy backbones have no pretrained weights"));
                }
            }
            BackboneName::ExternalFeatureExtractor => {
                if self.input_dim != 0 && self.input_dim != self.output_dim {
                    return Err(Error::config(
                        "backbone.output_dim",
                        "precomputed features pass through unchanged, so output_dim must equal input_dim",
                    ));
                }
            }
            name => {
                let w = name.canonical_width().expect("image backbone");
                if self.output_dim != w {
                    return Err(Error::config(
                        "backbone.output_dim",
                        format!("{name} has penultimate width {w}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BottleneckSpec {
    pub width: usize,
    pub has_activation: bool,
    pub has_normalization: bool,
}

impl Default for BottleneckSpec {
    fn default() -> Self {
        Self {
            width: 256,
            has_activation: true,
            has_normalization: true,
        }
    }
}

/// A frozen, externally supplied feature extractor (pretrained image
/// backbones, foundation-model encoders).
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    fn extract(&self, batch: &Array2<f64>) -> Result<Array2<f64>>;
}

#[derive(Clone)]
pub enum Backbone {
    Mlp(Vec<Linear>),
    Cnn(ToyCnn),
    /// Rows are already features.
    Identity(usize),
    External(Arc<dyn FeatureExtractor>),
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backbone::Mlp(l) => f.debug_tuple("Mlp").field(&l.len()).finish(),
            Backbone::Cnn(_) => f.write_str("Cnn"),
            Backbone::Identity(d) => f.debug_tuple("Identity").field(d).finish(),
            Backbone::External(e) => f.debug_tuple("External").field(&e.name()).finish(),
        }
    }
}

/// Two strided 3×3 convolutions with ReLU, then global average pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCnn {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub input_shape: [usize; 3],
}

struct CnnCache {
    input: Array4<f64>,
    a1: Array4<f64>,
    a2: Array4<f64>,
}

struct CnnGrads {
    a1: Array4<f64>,
    a2: Array4<f64>,
}

impl ToyCnn {
    fn new<R: Rng + ?Sized>(input_shape: [usize; 3], out: usize, rng: &mut R) -> Self {
        let mid = (out / 2).max(4);
        Self {
            conv1: Conv2d::new(input_shape[0], mid, 3, 2, 1, rng),
            conv2: Conv2d::new(mid, out, 3, 2, 1, rng),
            input_shape,
        }
    }

    fn reshape(&self, x: &Array2<f64>) -> Result<Array4<f64>> {
        let [c, h, w] = self.input_shape;
        if x.ncols() != c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "toy-cnn expects {} values per sample ({c}x{h}x{w}), got {}",
                c * h * w,
                x.ncols()
            )));
        }
        x.to_owned()
            .into_shape_with_order((x.nrows(), c, h, w))
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, CnnCache)> {
        let input = self.reshape(x)?;
        let a1 = self.conv1.forward(&input).mapv(|v| v.max(0.0));
        let a2 = self.conv2.forward(&a1).mapv(|v| v.max(0.0));
        let pooled = a2
            .mean_axis(Axis(3))
            .and_then(|m| m.mean_axis(Axis(2)))
            .expect("non-empty spatial map");
        Ok((pooled, CnnCache { input, a1, a2 }))
    }

    fn backward(&self, cache: &CnnCache, grad_out: &Array2<f64>, grads: &mut ToyCnn) -> CnnGrads {
        let (n, c, h, w) = cache.a2.dim();
        let area = (h * w) as f64;
        let g_a2 = Array4::from_shape_fn((n, c, h, w), |(s, k, _, _)| grad_out[[s, k]] / area);
        let mut g_pre2 = g_a2.clone();
        g_pre2.zip_mut_with(&cache.a2, |g, &a| if a <= 0.0 { *g = 0.0 });
        let g_a1 = self.conv2.backward(&cache.a1, &g_pre2, &mut grads.conv2);
        let mut g_pre1 = g_a1.clone();
        g_pre1.zip_mut_with(&cache.a1, |g, &a| if a <= 0.0 { *g = 0.0 });
        self.conv1.backward(&cache.input, &g_pre1, &mut grads.conv1);
        CnnGrads { a1: g_a1, a2: g_a2 }
    }
}

impl Module for ToyCnn {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        prefixed("conv1", self.conv1.params())
            .chain(prefixed("conv2", self.conv2.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        prefixed("conv1", self.conv1.params_mut())
            .chain(prefixed("conv2", self.conv2.params_mut()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bottleneck {
    pub linear: Linear,
    pub norm: Option<BatchNorm1d>,
    pub activation: bool,
}

impl Bottleneck {
    pub fn width(&self) -> usize {
        self.linear.out_dim()
    }
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub backbone: Backbone,
    pub bottleneck: Bottleneck,
    pub classifier: Linear,
    pub discriminator: Option<DomainDiscriminator>,
    /// Backbone parameters receive no updates.
    pub freeze_backbone: bool,
}

enum BackboneCache {
    Mlp(Vec<Array2<f64>>),
    Cnn(CnnCache),
    None,
}

/// Activations of one forward pass, kept for the backward pass.
pub struct ForwardPass {
    pub features: Array2<f64>,
    pub logits: Array2<f64>,
    backbone: BackboneCache,
    backbone_out: Array2<f64>,
    bn: Option<BatchNormCache>,
}

/// Upstream gradients delivered to [`ModelBundle::backward`].
#[derive(Debug, Default, Clone)]
pub struct OutputGrads {
    /// Gradient on bottleneck features from feature-level losses.
    pub features: Option<Array2<f64>>,
    /// Gradient on logits (cross-entropy and prediction-level losses).
    pub logits: Option<Array2<f64>>,
    /// Gradient on logits whose path into the features passes through a
    /// gradient reversal layer with the given coefficient. The classifier
    /// itself receives it unreversed.
    pub reversed_logits: Option<(Array2<f64>, f64)>,
}

impl ModelBundle {
    pub fn build<R: Rng + ?Sized>(
        backbone: &BackboneSpec,
        bottleneck: &BottleneckSpec,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        backbone.validate()?;
        if bottleneck.width == 0 {
            return Err(Error::config("bottleneck.width", "must be >= 1"));
        }
        if classes == 0 {
            return Err(Error::config("classes", "must be >= 1"));
        }
        let net = match backbone.name {
            BackboneName::ToyMlp => {
                if backbone.input_dim == 0 {
                    return Err(Error::config("backbone.input_dim", "unresolved; fit the spec to the data first"));
                }
                let mut layers = Vec::new();
                let mut fan_in = backbone.input_dim;
                for &h in &backbone.hidden {
                    layers.push(Linear::new(fan_in, h, rng));
                    fan_in = h;
                }
                Backbone::Mlp(layers)
            }
            BackboneName::ToyCnn => Backbone::Cnn(ToyCnn::new(backbone.input_shape, backbone.output_dim, rng)),
            BackboneName::ExternalFeatureExtractor => {
                if backbone.input_dim == 0 {
                    return Err(Error::config("backbone.input_dim", "unresolved; fit the spec to the data first"));
                }
                Backbone::Identity(backbone.output_dim)
            }
            other => return Err(Error::BackboneUnavailable(other.to_string())),
        };
        Ok(Self::assemble(net, backbone.output_dim, bottleneck, classes, rng))
    }

    /// Wraps a frozen external extractor (e.g. a pretrained image network).
    pub fn with_external_backbone<R: Rng + ?Sized>(
        extractor: Arc<dyn FeatureExtractor>,
        bottleneck: &BottleneckSpec,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let dim = extractor.output_dim();
        let mut m = Self::assemble(Backbone::External(extractor), dim, bottleneck, classes, rng);
        m.freeze_backbone = true;
        m
    }

    fn assemble<R: Rng + ?Sized>(
        backbone: Backbone,
        backbone_dim: usize,
        spec: &BottleneckSpec,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let bottleneck = Bottleneck {
            linear: Linear::new(backbone_dim, spec.width, rng),
            norm: spec.has_normalization.then(|| BatchNorm1d::new(spec.width)),
            activation: spec.has_activation,
        };
        let classifier = Linear::new(spec.width, classes, rng);
        Self {
            backbone,
            bottleneck,
            classifier,
            discriminator: None,
            freeze_backbone: false,
        }
    }

    pub fn with_discriminator<R: Rng + ?Sized>(mut self, width: usize, dropout: f64, rng: &mut R) -> Self {
        self.discriminator = Some(DomainDiscriminator::new(self.bottleneck.width(), width, dropout, rng));
        self
    }

    pub fn classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn feature_width(&self) -> usize {
        self.bottleneck.width()
    }

    /// Whether the backbone has pretrained (externally supplied) weights.
    pub fn has_pretrained_backbone(&self) -> bool {
        matches!(self.backbone, Backbone::External(_))
    }

    /// Zeroed copy used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_params();
        g
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Result<ForwardPass> {
        if x.nrows() == 0 {
            return Err(Error::Empty("forward batch".into()));
        }
        let (backbone_out, backbone) = match &self.backbone {
            Backbone::Mlp(layers) => {
                let expected = layers.first().map_or(0, Linear::in_dim);
                if x.ncols() != expected {
                    return Err(Error::ShapeMismatch(format!(
                        "toy-mlp expects {expected} inputs, got {}",
                        x.ncols()
                    )));
                }
                let mut acts = vec![x.clone()];
                for layer in layers {
                    let h = relu(&layer.forward(acts.last().expect("input present")));
                    acts.push(h);
                }
                let out = acts.last().expect("at least one layer").clone();
                (out, BackboneCache::Mlp(acts))
            }
            Backbone::Cnn(cnn) => {
                let (out, cache) = cnn.forward(x)?;
                (out, BackboneCache::Cnn(cache))
            }
            Backbone::Identity(d) => {
                if x.ncols() != *d {
                    return Err(Error::ShapeMismatch(format!("expected {d} precomputed features, got {}", x.ncols())));
                }
                (x.clone(), BackboneCache::None)
            }
            Backbone::External(e) => {
                let out = e.extract(x)?;
                if out.ncols() != e.output_dim() || out.nrows() != x.nrows() {
                    return Err(Error::ShapeMismatch(format!(
                        "extractor {} returned {:?}",
                        e.name(),
                        out.dim()
                    )));
                }
                (out, BackboneCache::None)
            }
        };
        let bottleneck_pre = self.bottleneck.linear.forward(&backbone_out);
        let (normed, bn) = match self.bottleneck.norm.as_mut() {
            Some(norm) => {
                let (y, c) = norm.forward(&bottleneck_pre, mode);
                (y, Some(c))
            }
            None => (bottleneck_pre, None),
        };
        let features = if self.bottleneck.activation { relu(&normed) } else { normed };
        let logits = self.classifier.forward(&features);
        Ok(ForwardPass {
            features,
            logits,
            backbone,
            backbone_out,
            bn,
        })
    }

    /// Eval-mode features and logits.
    pub fn predict(&mut self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let pass = self.forward(x, Mode::Eval)?;
        Ok((pass.features, pass.logits))
    }

    /// Backpropagates `upstream` through the model, accumulating into `grads`.
    pub fn backward(&self, pass: &ForwardPass, upstream: &OutputGrads, grads: &mut ModelBundle) {
        let mut g_feat = upstream
            .features
            .clone()
            .unwrap_or_else(|| Array2::zeros(pass.features.dim()));
        if let Some(g) = &upstream.logits {
            g_feat += &self.classifier.backward(&pass.features, g, &mut grads.classifier);
        }
        if let Some((g, coeff)) = &upstream.reversed_logits {
            let through = self.classifier.backward(&pass.features, g, &mut grads.classifier);
            g_feat.scaled_add(-coeff, &through);
        }
        self.backward_from_features(pass, g_feat, grads, !self.freeze_backbone);
    }

    fn backward_from_features(
        &self,
        pass: &ForwardPass,
        g_feat: Array2<f64>,
        grads: &mut ModelBundle,
        through_backbone: bool,
    ) -> Option<CnnGrads> {
        let g = if self.bottleneck.activation {
            relu_backward(&pass.features, &g_feat)
        } else {
            g_feat
        };
        let g = match (&self.bottleneck.norm, &pass.bn, grads.bottleneck.norm.as_mut()) {
            (Some(norm), Some(cache), Some(gn)) => norm.backward(cache, &g, gn),
            _ => g,
        };
        let g = self.bottleneck.linear.backward(&pass.backbone_out, &g, &mut grads.bottleneck.linear);
        if !through_backbone {
            return None;
        }
        match (&self.backbone, &pass.backbone, &mut grads.backbone) {
            (Backbone::Mlp(layers), BackboneCache::Mlp(acts), Backbone::Mlp(glayers)) => {
                let mut g = g;
                for (i, layer) in layers.iter().enumerate().rev() {
                    let pre = relu_backward(&acts[i + 1], &g);
                    g = layer.backward(&acts[i], &pre, &mut glayers[i]);
                }
                None
            }
            (Backbone::Cnn(cnn), BackboneCache::Cnn(cache), Backbone::Cnn(gcnn)) => Some(cnn.backward(cache, &g, gcnn)),
            _ => None,
        }
    }

    /// Spatial activations at `layer` and the gradient of the `class` logit
    /// with respect to them, for one eval-mode sample.
    pub fn activation_gradients(&mut self, sample: &Array2<f64>, class: usize, layer: &str) -> Result<(Array3<f64>, Array3<f64>)> {
        if class >= self.classes() {
            return Err(Error::ShapeMismatch(format!(
                "class index {class} out of range for {} classes",
                self.classes()
            )));
        }
        if !matches!(self.backbone, Backbone::Cnn(_)) || !matches!(layer, "conv1" | "conv2") {
            return Err(Error::UnsupportedLayer(layer.to_string()));
        }
        if sample.nrows() != 1 {
            return Err(Error::ShapeMismatch("activation maps are computed one sample at a time".into()));
        }
        let pass = self.forward(sample, Mode::Eval)?;
        let mut g_logits = Array2::zeros(pass.logits.dim());
        g_logits[[0, class]] = 1.0;
        let mut scratch = self.zeros_like();
        let g_feat = self.classifier.backward(&pass.features, &g_logits, &mut scratch.classifier);
        let cnn_grads = self
            .backward_from_features(&pass, g_feat, &mut scratch, true)
            .expect("cnn backbone produces spatial gradients");
        let BackboneCache::Cnn(cache) = &pass.backbone else {
            unreachable!("checked cnn backbone")
        };
        let (acts, grads) = match layer {
            "conv1" => (&cache.a1, cnn_grads.a1),
            _ => (&cache.a2, cnn_grads.a2),
        };
        Ok((acts.index_axis(Axis(0), 0).to_owned(), grads.index_axis_move(Axis(0), 0)))
    }

    pub fn save_checkpoint(&self, path: &Path, fingerprint: &str, epoch: usize) -> Result<()> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_fingerprint: fingerprint.to_string(),
            epoch,
            params: self
                .params()
                .into_iter()
                .map(|(n, v)| NamedTensor::from_view(n, &v))
                .collect(),
            buffers: self
                .buffers()
                .into_iter()
                .map(|(n, v)| NamedTensor::from_view(n, &v))
                .collect(),
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &ck)?;
        Ok(())
    }

    /// Restores parameters and buffers; returns the stored fingerprint and epoch.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<(String, usize)> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(file)?;
        if ck.format_version / 1000 != CHECKPOINT_VERSION / 1000 {
            return Err(Error::Parse(format!(
                "checkpoint format {} incompatible with {}",
                ck.format_version, CHECKPOINT_VERSION
            )));
        }
        restore(self.params_mut(), &ck.params)?;
        restore(self.buffers_mut(), &ck.buffers)?;
        Ok((ck.config_fingerprint, ck.epoch))
    }
}

fn restore(targets: Vec<(String, ArrayViewMutD<'_, f64>)>, stored: &[NamedTensor]) -> Result<()> {
    if targets.len() != stored.len() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {} tensors, model has {}",
            stored.len(),
            targets.len()
        )));
    }
    for ((name, mut dst), src) in targets.into_iter().zip(stored) {
        if name != src.name || dst.shape() != src.shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                src.name,
                src.shape,
                name,
                dst.shape()
            )));
        }
        dst.assign(&src.to_array());
    }
    Ok(())
}

/// Major version × 1000 + minor.
pub const CHECKPOINT_VERSION: u32 = 1000;

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config_fingerprint: String,
    epoch: usize,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
}

impl Module for Backbone {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        match self {
            Backbone::Mlp(layers) => layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.params()))
                .collect(),
            Backbone::Cnn(c) => c.params(),
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        match self {
            Backbone::Mlp(layers) => layers
                .iter_mut()
                .enumerate()
                .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.params_mut()))
                .collect(),
            Backbone::Cnn(c) => c.params_mut(),
            _ => Vec::new(),
        }
    }
}

impl Module for Bottleneck {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<_> = prefixed("linear", self.linear.params()).collect();
        if let Some(n) = &self.norm {
            out.extend(prefixed("norm", n.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<_> = prefixed("linear", self.linear.params_mut()).collect();
        if let Some(n) = self.norm.as_mut() {
            out.extend(prefixed("norm", n.params_mut()));
        }
        out
    }

    fn buffers(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        self.norm
            .as_ref()
            .map(|n| prefixed("norm", n.buffers()).collect())
            .unwrap_or_default()
    }

    fn buffers_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        self.norm
            .as_mut()
            .map(|n| prefixed("norm", n.buffers_mut()).collect())
            .unwrap_or_default()
    }
}

impl Module for ModelBundle {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<_> = prefixed("backbone", self.backbone.params())
            .chain(prefixed("bottleneck", self.bottleneck.params()))
            .chain(prefixed("classifier", self.classifier.params()))
            .collect();
        if let Some(d) = &self.discriminator {
            out.extend(prefixed("discriminator", d.params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<_> = prefixed("backbone", self.backbone.params_mut())
            .chain(prefixed("bottleneck", self.bottleneck.params_mut()))
            .chain(prefixed("classifier", self.classifier.params_mut()))
            .collect();
        if let Some(d) = self.discriminator.as_mut() {
            out.extend(prefixed("discriminator", d.params_mut()));
        }
        out
    }

    fn buffers(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        prefixed("bottleneck", self.bottleneck.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        prefixed("bottleneck", self.bottleneck.buffers_mut()).collect()
    }
}
