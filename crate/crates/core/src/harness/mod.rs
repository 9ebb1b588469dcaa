//! Experiment plumbing: single runs with their artifact directory, grid
//! sweeps and reports over finished runs.

mod report;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::train::{build_model, load_scenario, run_experiment, ExperimentConfig, ScenarioData, BEST_CHECKPOINT, FINAL_CHECKPOINT};

pub use report::{cmd_report, read_metric_csv, read_report_table, MetricLog, ReportOutput, ReportRow};
pub use sweep::{
    cmd_sweep, read_pivot, read_summary, run_sweep, PivotTable, SweepAxes, SweepFailure, SweepOutcome, SweepPlan, SweepRow,
};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ERROR_FILE: &str = "error.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const NORMALIZATION_FILE: &str = "normalization.json";

/// Where a run lives and what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: Option<PathBuf>,
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub fingerprint: String,
}

impl RunManifest {
    /// Resolves `config` and places it under `out_root`. The directory name is
    /// unique per (fingerprint, seed).
    pub fn new(config: &ExperimentConfig, config_path: Option<&Path>, out_root: &Path) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let fingerprint = config.fingerprint()?;
        let out_dir = out_root.join(run_dir_name(&config, &fingerprint));
        Ok(Self {
            config_path: config_path.map(Path::to_path_buf),
            config,
            out_dir,
            fingerprint,
        })
    }
}

pub fn run_dir_name(cfg: &ExperimentConfig, fingerprint: &str) -> String {
    format!("{}-{}-s{}", cfg.algorithm, &fingerprint[..8], cfg.seed)
}

/// The per-run record written next to the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub scenario: String,
    pub backbone: String,
    pub batch_size: usize,
    pub seed: u64,
    pub best_accuracy: f64,
    /// 1-based.
    pub best_epoch: usize,
    pub final_accuracy: f64,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub error: String,
}

/// Trains one configuration and writes its artifacts under `out_root`.
///
/// An existing run directory is refused unless `overwrite` is set. A failure
/// after the directory exists leaves the partial artifacts plus `error.json`.
pub fn cmd_run(config: &ExperimentConfig, config_path: Option<&Path>, out_root: &Path, overwrite: bool) -> Result<RunSummary> {
    let manifest = RunManifest::new(config, config_path, out_root)?;
    let dir = &manifest.out_dir;
    if dir.exists() {
        if !overwrite {
            return Err(Error::RunCollision(dir.clone()));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_SNAPSHOT), manifest.config.to_toml_string()?)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    match execute(&manifest) {
        Ok(summary) => Ok(summary),
        Err(e) => {
            let record = ErrorRecord { error: e.to_string() };
            if let Err(write_err) = fs::write(dir.join(ERROR_FILE), serde_json::to_string_pretty(&record)?) {
                log::error!("could not record failure in {}: {write_err}", dir.display());
            }
            Err(e)
        }
    }
}

fn execute(manifest: &RunManifest) -> Result<RunSummary> {
    let cfg = &manifest.config;
    let dir = &manifest.out_dir;
    let data = load_scenario(&cfg.scenario, cfg.seed)?;
    if let Some(norm) = &data.normalization {
        fs::write(dir.join(NORMALIZATION_FILE), serde_json::to_string_pretty(norm)?)?;
    }
    let out = run_experiment(cfg, &data, Some(dir))?;
    let summary = RunSummary {
        algorithm: cfg.algorithm.to_string(),
        scenario: cfg.scenario.name.clone(),
        backbone: cfg.backbone.name.to_string(),
        batch_size: cfg.batch_size(),
        seed: cfg.seed,
        best_accuracy: out.best_accuracy,
        best_epoch: out.best_epoch,
        final_accuracy: out.final_accuracy,
        fingerprint: manifest.fingerprint.clone(),
    };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

pub fn read_summary_record(dir: &Path) -> Result<RunSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)?)
}

/// Re-derives the fingerprint from the stored config snapshot and compares
/// it with the summary record.
pub fn verify_run(dir: &Path) -> Result<bool> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_SNAPSHOT))?;
    Ok(cfg.fingerprint()? == read_summary_record(dir)?.fingerprint)
}

/// A finished run reloaded from its directory.
pub struct LoadedRun {
    pub config: ExperimentConfig,
    pub data: ScenarioData,
    pub model: ModelBundle,
    /// Epoch stored in the checkpoint.
    pub epoch: usize,
}

/// Rebuilds the data and model of a run and restores the best checkpoint
/// (or the final one when `final_checkpoint` is set).
pub fn load_run(dir: &Path, final_checkpoint: bool) -> Result<LoadedRun> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_SNAPSHOT))?;
    let data = load_scenario(&config.scenario, config.seed)?;
    let mut model = build_model(&config, &data)?;
    let name = if final_checkpoint { FINAL_CHECKPOINT } else { BEST_CHECKPOINT };
    let (fingerprint, epoch) = model.load_checkpoint(&dir.join(name))?;
    if fingerprint != config.fingerprint()? {
        return Err(Error::Parse(format!(
            "checkpoint {} was written by a different config",
            dir.join(name).display()
        )));
    }
    Ok(LoadedRun {
        config,
        data,
        model,
        epoch,
    })
}
