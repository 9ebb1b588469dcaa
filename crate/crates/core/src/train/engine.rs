use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{concatenate, s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Algorithm, ExperimentConfig, ScenarioKind, ScenarioSpec};
use super::loader::CyclingLoader;
use super::optim::Sgd;
use crate::adversarial::DomainTag;
use crate::adversarial::domain_adversarial;
use crate::data::{
    apply_ood_transform, compute_normalization, gen_synthetic_domains, load_image_folder, mix_seed, split_stream,
    subsample_indices_per_class, subsample_per_class, ImageSource, InputSource, LabeledSet, Normalization,
};
use crate::error::{Error, Result};
use crate::eval::{a_distance, accuracy, balanced_accuracy, macro_f1, predict_set, FeatureDump};
use crate::losses::{bnm, cmmd, coral, lmmd, mmd, mutual_info, nwd, subdomain_weights, LossValue};
use crate::model::{BackboneName, ModelBundle, OutputGrads};
use crate::nn::{Mode, Module};
use crate::numerics::{softmax_backward, Domain, FeatureMatrix, ProbabilityMatrix};

const INIT_SALT: u64 = 1;
const SOURCE_SALT: u64 = 2;
const TARGET_SALT: u64 = 3;
const DROPOUT_SALT: u64 = 4;
const STREAM_SALT: u64 = 5;
const AUGMENT_SALT: u64 = 6;
const PROBE_SALT: u64 = 7;

/// Mean cross-entropy of softmax(logits) against integer labels, with the
/// gradient on the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!("{} labels for {b} logit rows", labels.len())));
    }
    if b == 0 {
        return Err(Error::Empty("cross-entropy batch".into()));
    }
    let mut grad = Array2::zeros((b, c));
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let y = labels[i];
        if y >= c {
            return Err(Error::ShapeMismatch(format!("label {y} out of range for {c} classes")));
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
        for (j, v) in row.iter().enumerate() {
            grad[[i, j]] = (v - lse).exp() / b as f64;
        }
        grad[[i, y]] -= 1.0 / b as f64;
    }
    Ok((total / b as f64, grad))
}

/// `ce + λ·da`.
pub fn total_loss(ce: &LossValue, da: &LossValue, lambda: f64) -> Result<LossValue> {
    if !(lambda >= 0.0) {
        return Err(Error::config("da_weight", "must be >= 0"));
    }
    Ok(LossValue::scalar(ce.value + lambda * da.value)
        .with_component("ce", ce.value)
        .with_component("da", da.value))
}

/// SHA-256 over the shape and little-endian bytes of a matrix.
pub fn matrix_hash(m: &Array2<f64>) -> String {
    let mut h = Sha256::new();
    h.update((m.nrows() as u64).to_le_bytes());
    h.update((m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn batch_hash(xs: &Array2<f64>, xt: Option<&Array2<f64>>) -> String {
    let mut h = matrix_hash(xs);
    if let Some(xt) = xt {
        h.push(':');
        h.push_str(&matrix_hash(xt));
    }
    h
}

/// Source and target sets of a scenario. Target labels are for evaluation only.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub source: LabeledSet,
    pub target: LabeledSet,
    /// (channels, height, width) when samples are images.
    pub image_shape: Option<[usize; 3]>,
    /// Normalization frozen for this run, when computed from the data.
    pub normalization: Option<Normalization>,
}

pub fn load_scenario(spec: &ScenarioSpec, seed: u64) -> Result<ScenarioData> {
    spec.validate()?;
    let mut data = match spec.kind {
        ScenarioKind::Synthetic => {
            let (source, target) = gen_synthetic_domains(&spec.synthetic)?;
            ScenarioData {
                source,
                target,
                image_shape: None,
                normalization: None,
            }
        }
        ScenarioKind::FeatureDump => {
            let sd = FeatureDump::read(spec.source_path.as_ref().expect("validated"))?;
            let td = FeatureDump::read(spec.target_path.as_ref().expect("validated"))?;
            let classes = sd.labels.iter().chain(&td.labels).max().map_or(1, |m| m + 1);
            ScenarioData {
                source: sd.domain_set(Domain::Source, Some(classes))?,
                target: td.domain_set(Domain::Target, Some(classes))?,
                image_shape: None,
                normalization: None,
            }
        }
        ScenarioKind::ImageFolder => {
            let (mut sm, _) = load_image_folder(spec.source_path.as_ref().expect("validated"))?;
            let (tm, _) = load_image_folder(spec.target_path.as_ref().expect("validated"))?;
            if sm.class_names != tm.class_names {
                return Err(Error::ShapeMismatch("source and target class folders differ".into()));
            }
            if let Some(k) = spec.subsample_per_class {
                sm = subsample_per_class(&sm, k, mix_seed(seed, SOURCE_SALT))?;
            }
            let mut pre = spec.preprocess.clone();
            let mut frozen = None;
            if pre.normalization == Normalization::Auto {
                pre.normalization = compute_normalization(&sm, &pre)?;
                frozen = Some(pre.normalization.clone());
            }
            let classes = sm.classes();
            let (sl, tl) = (sm.labels(), tm.labels());
            let source_inputs = ImageSource::new(sm, pre.clone())?;
            let mut target_inputs = ImageSource::new(tm, pre.clone())?;
            if let Some(t) = &spec.ood {
                target_inputs = apply_ood_transform(&target_inputs, t)?;
            }
            let crop = pre.crop as usize;
            return Ok(ScenarioData {
                source: LabeledSet::new(Arc::new(source_inputs), sl, classes)?,
                target: LabeledSet::new(Arc::new(target_inputs), tl, classes)?,
                image_shape: Some([3, crop, crop]),
                normalization: frozen,
            });
        }
    };
    if let Some(k) = spec.subsample_per_class {
        let keep = subsample_indices_per_class(&data.source.labels, data.source.classes, k, mix_seed(seed, SOURCE_SALT))?;
        data.source = data.source.subset(&keep)?;
    }
    Ok(data)
}

/// Builds the model for `cfg`, seeded from `cfg.seed`.
pub fn build_model(cfg: &ExperimentConfig, data: &ScenarioData) -> Result<ModelBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, INIT_SALT));
    let spec = cfg.backbone.fitted_to(data.source.inputs.dim(), data.image_shape);
    if data.target.inputs.dim() != data.source.inputs.dim() {
        return Err(Error::ShapeMismatch(format!(
            "source samples have {} values, target samples {}",
            data.source.inputs.dim(),
            data.target.inputs.dim()
        )));
    }
    let mut model = ModelBundle::build(&spec, &cfg.bottleneck, data.source.classes, &mut rng)?;
    if spec.name == BackboneName::ExternalFeatureExtractor {
        model.freeze_backbone = true;
    }
    if cfg.algorithm == Algorithm::Dann {
        model = model.with_discriminator(cfg.discriminator.width, cfg.discriminator.dropout, &mut rng);
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub ce: f64,
    /// Unweighted adaptation term.
    pub da: f64,
}

/// Hashes of the feature matrices handed to the adaptation loss on one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapRecord {
    pub step: usize,
    pub source_features: String,
    pub target_features: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub steps: usize,
    pub optimizer: Sgd,
    /// Running maximum of per-epoch target accuracy.
    pub best_accuracy: f64,
    /// 1-based epoch of `best_accuracy`; 0 before any evaluation.
    pub best_epoch: usize,
    /// Mean total loss of each completed epoch.
    pub loss_history: Vec<f64>,
}

impl TrainState {
    /// Records an epoch's accuracy; returns whether it is a new best.
    pub fn record_epoch(&mut self, accuracy: f64, mean_loss: f64) -> bool {
        self.epoch += 1;
        self.loss_history.push(mean_loss);
        if self.best_epoch == 0 || accuracy > self.best_accuracy {
            self.best_accuracy = accuracy;
            self.best_epoch = self.epoch;
            true
        } else {
            false
        }
    }
}

/// One model, its optimiser, and the combined objective of one algorithm.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub model: ModelBundle,
    pub state: TrainState,
    dropout_rng: ChaCha8Rng,
    total_steps: usize,
    /// When set, every step appends the hashes of the adaptation-loss inputs.
    pub tap: Option<Vec<TapRecord>>,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, model: ModelBundle) -> Self {
        let boost = cfg.backbone.pretrained && model.backbone.param_count() > 0;
        let mult = cfg.new_layer_lr_multiplier;
        let optimizer = Sgd::new(&model, cfg.momentum(), cfg.weight_decay(), |name| {
            if boost && !name.starts_with("backbone.") {
                mult
            } else {
                1.0
            }
        });
        Self {
            total_steps: cfg.epochs() * cfg.iters_per_epoch(),
            dropout_rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, DROPOUT_SALT)),
            cfg: cfg.clone(),
            model,
            state: TrainState {
                epoch: 0,
                steps: 0,
                optimizer,
                best_accuracy: 0.0,
                best_epoch: 0,
                loss_history: Vec::new(),
            },
            tap: None,
        }
    }

    fn progress(&self) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            (self.state.steps as f64 / self.total_steps as f64).min(1.0)
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.learning_rate() * self.cfg.lr_schedule.factor(self.progress())
    }

    /// Gradient-reversal coefficient of the adversarial branch.
    pub fn reversal_coefficient(&self) -> f64 {
        if self.cfg.dann_ramp {
            2.0 / (1.0 + (-10.0 * self.progress()).exp()) - 1.0
        } else {
            1.0
        }
    }

    /// Forward, loss and backward for one batch pair. Batch-norm running
    /// statistics advance; parameters do not.
    pub fn gradients(
        &mut self,
        xs: &Array2<f64>,
        ys: &[usize],
        xt: Option<&Array2<f64>>,
    ) -> Result<(StepLosses, ModelBundle)> {
        let alg = self.cfg.algorithm;
        let lambda = self.cfg.da_weight();
        let pass_s = self.model.forward(xs, Mode::Train)?;
        let (ce, g_ce) = cross_entropy(&pass_s.logits, ys)?;
        let mut up_s = OutputGrads {
            logits: Some(g_ce),
            ..Default::default()
        };
        let mut up_t = OutputGrads::default();
        let mut grads = self.model.zeros_like();
        let mut da = 0.0;
        let mut pass_t = None;
        if alg != Algorithm::None {
            let xt = xt.ok_or_else(|| Error::Empty("target batch".into()))?;
            let pt = self.model.forward(xt, Mode::Train)?;
            da = self.adaptation(&pass_s, &pt, ys, lambda, &mut up_s, &mut up_t, &mut grads)?;
            pass_t = Some(pt);
        }
        let total = if alg == Algorithm::Daln {
            ce - lambda * da
        } else {
            ce + lambda * da
        };
        if !total.is_finite() {
            return Err(Error::Diverged {
                step: self.state.steps,
                message: format!("non-finite loss (ce {ce}, adaptation {da})"),
                batch_hash: batch_hash(xs, xt),
            });
        }
        self.model.backward(&pass_s, &up_s, &mut grads);
        if let Some(pt) = &pass_t {
            self.model.backward(pt, &up_t, &mut grads);
        }
        Ok((StepLosses { total, ce, da }, grads))
    }

    #[allow(clippy::too_many_arguments)]
    fn adaptation(
        &mut self,
        pass_s: &crate::model::ForwardPass,
        pass_t: &crate::model::ForwardPass,
        ys: &[usize],
        lambda: f64,
        up_s: &mut OutputGrads,
        up_t: &mut OutputGrads,
        grads: &mut ModelBundle,
    ) -> Result<f64> {
        let fs = FeatureMatrix::source(pass_s.features.clone())?;
        let ft = FeatureMatrix::target(pass_t.features.clone())?;
        if let Some(tap) = self.tap.as_mut() {
            tap.push(TapRecord {
                step: self.state.steps,
                source_features: matrix_hash(fs.data()),
                target_features: matrix_hash(ft.data()),
            });
        }
        let classes = self.model.classes();
        let kernel = &self.cfg.kernel;
        let value = match self.cfg.algorithm {
            Algorithm::None => 0.0,
            Algorithm::Coral => {
                let (l, g) = coral(&fs, &ft)?;
                add_features(up_s, g.source * lambda);
                add_features(up_t, g.target * lambda);
                l.value
            }
            Algorithm::EudaMmd => {
                let (l, g) = mmd(&fs, &ft, kernel)?;
                add_features(up_s, g.source * lambda);
                add_features(up_t, g.target * lambda);
                l.value
            }
            Algorithm::Dsan => {
                let ws = subdomain_weights(&ProbabilityMatrix::one_hot(ys, classes)?);
                let wt = subdomain_weights(&ProbabilityMatrix::from_logits(&pass_t.logits)?);
                let (l, g) = lmmd(&fs, &ft, &ws, &wt, kernel)?;
                add_features(up_s, g.source * lambda);
                add_features(up_t, g.target * lambda);
                l.value
            }
            Algorithm::Dcan => {
                let ys_p = ProbabilityMatrix::one_hot(ys, classes)?;
                let pt = ProbabilityMatrix::from_logits(&pass_t.logits)?;
                let (l, g) = cmmd(&fs, &ft, &ys_p, &pt, &self.cfg.cmmd)?;
                add_features(up_s, g.source * lambda);
                add_features(up_t, g.target * lambda);
                let (mi, gp) = mutual_info(&pt);
                add_logits(up_t, softmax_backward(pt.data(), &gp) * lambda);
                l.value + mi.value
            }
            Algorithm::Bnm => {
                let pt = ProbabilityMatrix::from_logits(&pass_t.logits)?;
                let (l, gp) = bnm(&pt)?;
                add_logits(up_t, softmax_backward(pt.data(), &gp) * lambda);
                l.value
            }
            Algorithm::Daln => {
                let ps = ProbabilityMatrix::from_logits(&pass_s.logits)?;
                let pt = ProbabilityMatrix::from_logits(&pass_t.logits)?;
                let (l, g) = nwd(&ps, &pt, self.cfg.nwd_form)?;
                // the critic (classifier) ascends NWD; features descend it through the reversal
                up_s.reversed_logits = Some((softmax_backward(ps.data(), &g.source) * (-lambda), 1.0));
                up_t.reversed_logits = Some((softmax_backward(pt.data(), &g.target) * (-lambda), 1.0));
                l.value
            }
            Algorithm::Dann => {
                let coeff = self.reversal_coefficient();
                let disc = self
                    .model
                    .discriminator
                    .as_ref()
                    .ok_or_else(|| Error::config("algorithm", "dann needs a domain discriminator"))?;
                let z = concatenate(Axis(0), &[fs.data().view(), ft.data().view()])
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                let pass = disc.forward(&z, Mode::Train, &mut self.dropout_rng);
                let tags: Vec<DomainTag> = std::iter::repeat_n(DomainTag::Source, fs.rows())
                    .chain(std::iter::repeat_n(DomainTag::Target, ft.rows()))
                    .collect();
                let (l, g_logits) = domain_adversarial(&pass.probabilities, &tags)?;
                let disc_grads = grads
                    .discriminator
                    .as_mut()
                    .expect("gradient buffers mirror the model");
                let g_in = disc.backward(&pass, &(g_logits * lambda), disc_grads) * (-coeff);
                let n = fs.rows();
                add_features(up_s, g_in.slice(s![..n, ..]).to_owned());
                add_features(up_t, g_in.slice(s![n.., ..]).to_owned());
                l.value
            }
        };
        Ok(value)
    }

    /// One optimiser step on the given batches.
    pub fn step(&mut self, xs: &Array2<f64>, ys: &[usize], xt: Option<&Array2<f64>>) -> Result<StepLosses> {
        let (losses, grads) = self.gradients(xs, ys, xt)?;
        let lr = self.current_lr();
        self.state.optimizer.step(&mut self.model, &grads, lr)?;
        self.state.steps += 1;
        Ok(losses)
    }

    /// `iters_per_epoch` steps of `B` source and `B` target samples; returns
    /// the mean losses. The target is passed without labels.
    pub fn train_epoch(
        &mut self,
        source: &LabeledSet,
        source_loader: &mut CyclingLoader,
        target: &dyn InputSource,
        target_loader: &mut CyclingLoader,
    ) -> Result<StepLosses> {
        let iters = self.cfg.iters_per_epoch();
        let mut sum = StepLosses::default();
        for _ in 0..iters {
            let step_seed = mix_seed(self.cfg.seed ^ AUGMENT_SALT, self.state.steps as u64);
            let si = source_loader.next_batch();
            let ti = target_loader.next_batch();
            let xs = source.inputs.batch(&si, Mode::Train, step_seed)?;
            let ys: Vec<usize> = si.iter().map(|&i| source.labels[i]).collect();
            let xt = if self.cfg.algorithm == Algorithm::None {
                None
            } else {
                Some(target.batch(&ti, Mode::Train, step_seed.wrapping_add(1))?)
            };
            let l = self.step(&xs, &ys, xt.as_ref())?;
            sum.total += l.total;
            sum.ce += l.ce;
            sum.da += l.da;
        }
        let n = iters as f64;
        Ok(StepLosses {
            total: sum.total / n,
            ce: sum.ce / n,
            da: sum.da / n,
        })
    }
}

fn add_features(up: &mut OutputGrads, g: Array2<f64>) {
    match up.features.as_mut() {
        Some(f) => *f += &g,
        None => up.features = Some(g),
    }
}

fn add_logits(up: &mut OutputGrads, g: Array2<f64>) {
    match up.logits.as_mut() {
        Some(l) => *l += &g,
        None => up.logits = Some(g),
    }
}

/// One row of the per-epoch metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss_total: f64,
    pub train_loss_ce: f64,
    pub train_loss_da: f64,
    pub target_accuracy: f64,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_distance: Option<f64>,
}

pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt.json";

const CSV_HEADER: [&str; 9] = [
    "epoch",
    "train_loss_total",
    "train_loss_ce",
    "train_loss_da",
    "target_accuracy",
    "wall_seconds",
    "balanced_accuracy",
    "macro_f1",
    "a_distance",
];

/// Appends metric records as JSON lines and CSV rows, flushing each row.
pub struct MetricLogWriter {
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
}

impl MetricLogWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        let jsonl = BufWriter::new(File::create(dir.join(METRICS_JSONL))?);
        let mut csv = csv::Writer::from_path(dir.join(METRICS_CSV))?;
        csv.write_record(CSV_HEADER)?;
        csv.flush()?;
        Ok(Self { jsonl, csv })
    }

    pub fn append(&mut self, r: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, r)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.csv.write_record([
            r.epoch.to_string(),
            r.train_loss_total.to_string(),
            r.train_loss_ce.to_string(),
            r.train_loss_da.to_string(),
            r.target_accuracy.to_string(),
            r.wall_seconds.to_string(),
            opt(r.balanced_accuracy),
            opt(r.macro_f1),
            opt(r.a_distance),
        ])?;
        self.csv.flush()?;
        Ok(())
    }
}

pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub struct RunOutput {
    pub records: Vec<MetricRecord>,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub final_accuracy: f64,
    pub model: ModelBundle,
    pub state: TrainState,
}

/// Trains for `epochs`, evaluating on the target after each epoch. When
/// `out_dir` is given, the metric log is flushed row by row and checkpoints
/// are written there.
pub fn run_experiment(cfg: &ExperimentConfig, data: &ScenarioData, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let model = build_model(cfg, data)?;
    let mut trainer = Trainer::new(cfg, model);
    let b = cfg.batch_size();
    let seed = cfg.seed;
    let plan = match cfg.scenario.stream_parts {
        Some(k) => Some(split_stream(data.source.len(), k, mix_seed(seed, STREAM_SALT))?),
        None => None,
    };
    let mut source_loader = CyclingLoader::new((0..data.source.len()).collect(), b, mix_seed(seed, SOURCE_SALT))?;
    let mut target_loader = CyclingLoader::new((0..data.target.len()).collect(), b, mix_seed(seed, TARGET_SALT))?;
    let mut writer = out_dir.map(MetricLogWriter::create).transpose()?;
    let fingerprint = cfg.fingerprint()?;
    let start = Instant::now();
    let mut records = Vec::new();
    for e in 0..cfg.epochs() {
        if let Some(plan) = &plan {
            source_loader = CyclingLoader::new(plan.part_for_epoch(e), b, mix_seed(seed, SOURCE_SALT + e as u64))?;
            if e > 0 && cfg.scenario.reset_optimizer_per_part {
                trainer.state.optimizer.reset();
            }
        }
        let losses = trainer.train_epoch(&data.source, &mut source_loader, data.target.inputs.as_ref(), &mut target_loader)?;
        let (target_features, preds) = predict_set(&mut trainer.model, &data.target, 512)?;
        let acc = accuracy(&data.target.labels, &preds)?;
        let m = &cfg.metrics;
        let a_dist = if m.a_distance {
            let (source_features, _) = predict_set(&mut trainer.model, &data.source, 512)?;
            Some(
                a_distance(
                    &FeatureMatrix::source(source_features)?,
                    &FeatureMatrix::target(target_features)?,
                    mix_seed(seed ^ PROBE_SALT, e as u64),
                )?
                .value,
            )
        } else {
            None
        };
        let record = MetricRecord {
            epoch: e + 1,
            train_loss_total: losses.total,
            train_loss_ce: losses.ce,
            train_loss_da: losses.da,
            target_accuracy: acc,
            wall_seconds: if cfg.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
            balanced_accuracy: m.balanced_accuracy.then(|| balanced_accuracy(&data.target.labels, &preds)).transpose()?,
            macro_f1: m.macro_f1.then(|| macro_f1(&data.target.labels, &preds)).transpose()?,
            a_distance: a_dist,
        };
        if let Some(w) = writer.as_mut() {
            w.append(&record)?;
        }
        log::info!(
            "{} epoch {}: loss {:.4} target accuracy {:.4}",
            cfg.algorithm,
            record.epoch,
            record.train_loss_total,
            record.target_accuracy
        );
        let improved = trainer.state.record_epoch(acc, losses.total);
        if improved && cfg.save_checkpoints {
            if let Some(dir) = out_dir {
                trainer.model.save_checkpoint(&dir.join(BEST_CHECKPOINT), &fingerprint, e + 1)?;
            }
        }
        records.push(record);
    }
    if cfg.save_checkpoints {
        if let Some(dir) = out_dir {
            trainer.model.save_checkpoint(&dir.join(FINAL_CHECKPOINT), &fingerprint, cfg.epochs())?;
        }
    }
    Ok(RunOutput {
        final_accuracy: records.last().map_or(0.0, |r| r.target_accuracy),
        best_accuracy: trainer.state.best_accuracy,
        best_epoch: trainer.state.best_epoch,
        records,
        model: trainer.model,
        state: trainer.state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticShiftSpec;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cross_entropy_matches_hand_values() {
        let (l, g) = cross_entropy(&array![[0.0, 0.0]], &[1]).unwrap();
        assert_abs_diff_eq!(l, 2f64.ln(), epsilon = 1e-15);
        assert_eq!(g, array![[0.5, -0.5]]);
        assert!(cross_entropy(&array![[0.0, 0.0]], &[2]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let ce = LossValue::scalar(1.2);
        let da = LossValue::scalar(0.4);
        assert_eq!(total_loss(&ce, &da, 0.0).unwrap().value, 1.2);
        assert_abs_diff_eq!(total_loss(&ce, &da, 0.5).unwrap().value, 1.4, epsilon = 1e-15);
        assert_eq!(total_loss(&ce, &LossValue::scalar(0.0), 3.0).unwrap().value, 1.2);
        assert!(total_loss(&ce, &da, -1.0).is_err());
    }

    fn tiny(alg: Algorithm) -> (ExperimentConfig, ScenarioData) {
        let mut cfg = ExperimentConfig::for_algorithm(alg);
        cfg.epochs = Some(2);
        cfg.iters_per_epoch = Some(5);
        cfg.batch_size = Some(8);
        cfg.bottleneck.width = 16;
        cfg.backbone.hidden = vec![16];
        cfg.backbone.output_dim = 16;
        cfg.discriminator.width = 16;
        cfg.record_wall_time = false;
        cfg.scenario.synthetic = SyntheticShiftSpec {
            samples_per_class: 20,
            ..Default::default()
        };
        let data = load_scenario(&cfg.scenario, 0).unwrap();
        (cfg, data)
    }

    #[test]
    fn every_algorithm_runs() {
        for alg in Algorithm::ALL {
            let (cfg, data) = tiny(alg);
            let out = run_experiment(&cfg, &data, None).unwrap();
            assert_eq!(out.records.len(), 2, "{alg}");
            assert_eq!(out.state.steps, 10);
            assert!(out.records.iter().all(|r| r.train_loss_total.is_finite()));
        }
    }

    #[test]
    fn step_counts_and_sample_consumption() {
        let (mut cfg, data) = tiny(Algorithm::Dsan);
        cfg.iters_per_epoch = Some(200);
        cfg.batch_size = Some(16);
        let model = build_model(&cfg, &data).unwrap();
        let mut t = Trainer::new(&cfg, model);
        let mut sl = CyclingLoader::new((0..data.source.len()).collect(), 16, 0).unwrap();
        let mut tl = CyclingLoader::new((0..data.target.len()).collect(), 16, 1).unwrap();
        t.train_epoch(&data.source, &mut sl, data.target.inputs.as_ref(), &mut tl).unwrap();
        assert_eq!(t.state.steps, 200);
        assert_eq!((sl.drawn(), tl.drawn()), (3200, 3200));
    }

    #[test]
    fn best_is_running_maximum() {
        let (cfg, data) = tiny(Algorithm::Coral);
        let out = run_experiment(&cfg, &data, None).unwrap();
        let max = out.records.iter().map(|r| r.target_accuracy).fold(0.0, f64::max);
        assert_eq!(out.best_accuracy, max);
    }

    #[test]
    fn writes_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, data) = tiny(Algorithm::Bnm);
        cfg.metrics = super::super::config::MetricOptions {
            balanced_accuracy: true,
            macro_f1: true,
            a_distance: true,
        };
        let out = run_experiment(&cfg, &data, Some(dir.path())).unwrap();
        let log = read_metric_log(&dir.path().join(METRICS_JSONL)).unwrap();
        assert_eq!(log, out.records);
        assert!(log[0].a_distance.is_some());
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
        let csv = std::fs::read_to_string(dir.path().join(METRICS_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
