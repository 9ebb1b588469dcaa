use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{OodTransform, PreprocessSpec, SyntheticShiftSpec};
use crate::error::{Error, Result};
use crate::losses::{CmmdConfig, NwdForm};
use crate::model::{BackboneSpec, BottleneckSpec};
use crate::numerics::KernelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Coral,
    Dann,
    Dsan,
    Bnm,
    Daln,
    Dcan,
    EudaMmd,
    None,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::Coral,
        Algorithm::Dann,
        Algorithm::Dsan,
        Algorithm::Bnm,
        Algorithm::Daln,
        Algorithm::Dcan,
        Algorithm::EudaMmd,
        Algorithm::None,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Coral => "coral",
            Algorithm::Dann => "dann",
            Algorithm::Dsan => "dsan",
            Algorithm::Bnm => "bnm",
            Algorithm::Daln => "daln",
            Algorithm::Dcan => "dcan",
            Algorithm::EudaMmd => "euda-mmd",
            Algorithm::None => "none",
        }
    }

    /// Published training recipe for the algorithm.
    pub fn recipe(&self) -> Recipe {
        let (learning_rate, weight_decay, da_weight) = match self {
            Algorithm::Coral => (3e-3, 5e-4, 10.0),
            Algorithm::Dann => (1e-2, 1e-3, 1.0),
            Algorithm::Dsan => (1e-2, 5e-4, 0.5),
            Algorithm::Bnm => (1e-3, 5e-4, 1.0),
            Algorithm::Daln => (1e-2, 1e-3, 0.1),
            Algorithm::Dcan => (1e-2, 5e-4, 0.5),
            Algorithm::EudaMmd => (3e-2, 0.0, 0.3),
            Algorithm::None => (1e-2, 5e-4, 0.0),
        };
        Recipe {
            learning_rate,
            weight_decay,
            da_weight,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            iters_per_epoch: 200,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Algorithm::ALL.iter().map(Algorithm::as_str).collect();
                Error::config("algorithm", format!("unknown algorithm `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recipe {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub da_weight: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub iters_per_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr·(1 + gamma·p)^(−power)` with training progress `p ∈ [0, 1]`.
    InverseDecay { gamma: f64, power: f64 },
}

impl LrSchedule {
    pub fn factor(&self, progress: f64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::InverseDecay { gamma, power } => (1.0 + gamma * progress).powf(-power),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    #[default]
    Synthetic,
    ImageFolder,
    /// Precomputed features in the feature-dump format.
    FeatureDump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Label used in summary tables.
    pub name: String,
    pub kind: ScenarioKind,
    pub synthetic: SyntheticShiftSpec,
    pub source_path: Option<PathBuf>,
    pub target_path: Option<PathBuf>,
    pub preprocess: PreprocessSpec,
    /// Corruption applied to every target sample.
    pub ood: Option<OodTransform>,
    /// Keep at most this many source samples per class.
    pub subsample_per_class: Option<usize>,
    /// Split the source into this many parts; epoch `e` trains on part `e mod K`.
    pub stream_parts: Option<usize>,
    pub reset_optimizer_per_part: bool,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            kind: ScenarioKind::Synthetic,
            synthetic: SyntheticShiftSpec::default(),
            source_path: None,
            target_path: None,
            preprocess: PreprocessSpec::default(),
            ood: None,
            subsample_per_class: None,
            stream_parts: None,
            reset_optimizer_per_part: false,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ScenarioKind::Synthetic => self.synthetic.validate()?,
            ScenarioKind::ImageFolder | ScenarioKind::FeatureDump => {
                if self.source_path.is_none() || self.target_path.is_none() {
                    return Err(Error::config(
                        "scenario.source_path",
                        "image-folder and feature-dump scenarios need source_path and target_path",
                    ));
                }
            }
        }
        if self.kind == ScenarioKind::ImageFolder {
            self.preprocess.validate()?;
        }
        if let Some(t) = &self.ood {
            if self.kind != ScenarioKind::ImageFolder {
                return Err(Error::config("scenario.ood", "out-of-distribution transforms apply to image folders"));
            }
            t.validate()?;
        }
        if self.subsample_per_class == Some(0) {
            return Err(Error::config("scenario.subsample_per_class", "must be >= 1"));
        }
        if self.stream_parts == Some(0) {
            return Err(Error::config("scenario.stream_parts", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub width: usize,
    pub dropout: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            width: 1024,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub balanced_accuracy: bool,
    pub macro_f1: bool,
    pub a_distance: bool,
}

/// One experiment. Recipe fields left unset take the algorithm's published
/// defaults; [`ExperimentConfig::resolved`] writes them out explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub da_weight: Option<f64>,
    pub momentum: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub iters_per_epoch: Option<usize>,
    pub lr_schedule: LrSchedule,
    /// Bottleneck, classifier and discriminator LR multiplier, used only
    /// with a pretrained backbone.
    pub new_layer_lr_multiplier: f64,
    /// Ramp the gradient-reversal coefficient from 0 to 1 over training.
    pub dann_ramp: bool,
    /// When false, `wall_seconds` is logged as 0 so logs are bit-reproducible.
    pub record_wall_time: bool,
    pub save_checkpoints: bool,
    pub metrics: MetricOptions,
    pub scenario: ScenarioSpec,
    pub backbone: BackboneSpec,
    pub bottleneck: BottleneckSpec,
    pub discriminator: DiscriminatorSpec,
    pub kernel: KernelSpec,
    pub cmmd: CmmdConfig,
    pub nwd_form: NwdForm,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::None,
            seed: 0,
            learning_rate: None,
            weight_decay: None,
            da_weight: None,
            momentum: None,
            epochs: None,
            batch_size: None,
            iters_per_epoch: None,
            lr_schedule: LrSchedule::Constant,
            new_layer_lr_multiplier: 10.0,
            dann_ramp: false,
            record_wall_time: true,
            save_checkpoints: true,
            metrics: MetricOptions::default(),
            scenario: ScenarioSpec::default(),
            backbone: BackboneSpec::default(),
            bottleneck: BottleneckSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            kernel: KernelSpec::default(),
            cmmd: CmmdConfig::default(),
            nwd_form: NwdForm::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            ..Default::default()
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(self.algorithm.recipe().learning_rate)
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay.unwrap_or(self.algorithm.recipe().weight_decay)
    }

    /// λ; always 0 for algorithm `none`.
    pub fn da_weight(&self) -> f64 {
        if self.algorithm == Algorithm::None {
            return 0.0;
        }
        self.da_weight.unwrap_or(self.algorithm.recipe().da_weight)
    }

    pub fn momentum(&self) -> f64 {
        self.momentum.unwrap_or(self.algorithm.recipe().momentum)
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(self.algorithm.recipe().epochs)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(self.algorithm.recipe().batch_size)
    }

    pub fn iters_per_epoch(&self) -> usize {
        self.iters_per_epoch.unwrap_or(self.algorithm.recipe().iters_per_epoch)
    }

    /// Copy with every recipe field explicit.
    pub fn resolved(&self) -> Self {
        Self {
            learning_rate: Some(self.learning_rate()),
            weight_decay: Some(self.weight_decay()),
            da_weight: Some(self.da_weight()),
            momentum: Some(self.momentum()),
            epochs: Some(self.epochs()),
            batch_size: Some(self.batch_size()),
            iters_per_epoch: Some(self.iters_per_epoch()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be a positive number, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate())?;
        positive("new_layer_lr_multiplier", self.new_layer_lr_multiplier)?;
        if !(self.weight_decay() >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if let Some(l) = self.da_weight {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::config("da_weight", "must be >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum()) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        for (field, v) in [
            ("epochs", self.epochs()),
            ("batch_size", self.batch_size()),
            ("iters_per_epoch", self.iters_per_epoch()),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if let LrSchedule::InverseDecay { gamma, power } = self.lr_schedule {
            if !(gamma >= 0.0) || !(power >= 0.0) {
                return Err(Error::config("lr_schedule", "gamma and power must be >= 0"));
            }
        }
        if self.discriminator.width == 0 || !(0.0..1.0).contains(&self.discriminator.dropout) {
            return Err(Error::config("discriminator", "width must be >= 1 and dropout in [0, 1)"));
        }
        if !(self.cmmd.regularizer >= 0.0) {
            return Err(Error::config("cmmd.regularizer", "must be >= 0"));
        }
        self.kernel.validate()?;
        self.scenario.validate()?;
        let probe = self.backbone.fitted_to(1, None);
        probe.validate()?;
        if self.bottleneck.width == 0 {
            return Err(Error::config("bottleneck.width", "must be >= 1"));
        }
        Ok(())
    }

    /// Parses TOML; unknown algorithm names and malformed fields are
    /// reported against the offending key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<config>", e.to_string()))?;
        Self::from_table(table)
    }

    pub(crate) fn from_table(table: toml::Table) -> Result<Self> {
        match table.get("algorithm") {
            Some(toml::Value::String(name)) => {
                Algorithm::from_str(name)?;
            }
            Some(_) => return Err(Error::config("algorithm", "must be a string")),
            None => return Err(Error::config("algorithm", "missing")),
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config serialisation: {e}")))
    }

    /// SHA-256 of the canonical TOML of the resolved config.
    pub fn fingerprint(&self) -> Result<String> {
        let text = self.resolved().to_toml_string()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}
