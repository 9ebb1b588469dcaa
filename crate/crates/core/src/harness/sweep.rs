use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{cmd_run, RunSummary};
use crate::error::{Error, Result};
use crate::model::BackboneName;
use crate::train::{Algorithm, ExperimentConfig, ScenarioSpec};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const FAILURES_CSV: &str = "failures.csv";
pub const TABLE_CSV: &str = "table.csv";
pub const TABLE_MD: &str = "table.md";
pub const RUNS_DIR: &str = "runs";

/// Grid axes. An absent axis keeps the base config's value; a present one
/// must list at least one value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub algorithm: Option<Vec<Algorithm>>,
    pub batch_size: Option<Vec<usize>>,
    pub backbone: Option<Vec<BackboneName>>,
    pub scenario: Option<Vec<ScenarioSpec>>,
    pub seed: Option<Vec<u64>>,
    /// Cells run concurrently at most this many at a time.
    pub parallel: Option<usize>,
}

/// A base experiment plus the `[sweep]` table of the same file.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub base: ExperimentConfig,
    pub axes: SweepAxes,
}

impl SweepPlan {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<config>", e.to_string()))?;
        let axes = match table.remove("sweep") {
            Some(v) => v
                .try_into()
                .map_err(|e: toml::de::Error| Error::config("sweep", e.message().to_string()))?,
            None => return Err(Error::config("sweep", "missing [sweep] table")),
        };
        let plan = Self {
            base: ExperimentConfig::from_table(table)?,
            axes,
        };
        plan.cells()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// The cartesian product of the axes, algorithm-major and seed-minor.
    pub fn cells(&self) -> Result<Vec<ExperimentConfig>> {
        fn axis<T: Clone>(name: &str, v: &Option<Vec<T>>, base: T) -> Result<Vec<T>> {
            match v {
                Some(v) if v.is_empty() => Err(Error::config(format!("sweep.{name}"), "axis has no values")),
                Some(v) => Ok(v.clone()),
                None => Ok(vec![base]),
            }
        }
        let b = &self.base;
        let a = &self.axes;
        if a.parallel == Some(0) {
            return Err(Error::config("sweep.parallel", "must be >= 1"));
        }
        let algorithms = axis("algorithm", &a.algorithm, b.algorithm)?;
        let scenarios = axis("scenario", &a.scenario, b.scenario.clone())?;
        let backbones = axis("backbone", &a.backbone, b.backbone.name)?;
        let batches = axis("batch_size", &a.batch_size.as_ref().map(|v| v.iter().map(|&x| Some(x)).collect()), b.batch_size)?;
        let seeds = axis("seed", &a.seed, b.seed)?;
        let mut cells = Vec::new();
        for &alg in &algorithms {
            for sc in &scenarios {
                for &bb in &backbones {
                    for batch in &batches {
                        for &seed in &seeds {
                            let mut c = b.clone();
                            c.algorithm = alg;
                            c.scenario = sc.clone();
                            c.backbone.name = bb;
                            c.batch_size = *batch;
                            c.seed = seed;
                            c.validate()?;
                            cells.push(c);
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

/// One line of the summary table. Failed cells carry `NaN` accuracy and no
/// best epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub algorithm: String,
    pub scenario: String,
    pub backbone: String,
    pub batch_size: usize,
    pub seed: u64,
    pub best_accuracy: f64,
    pub best_epoch: Option<usize>,
}

impl PartialEq for SweepRow {
    fn eq(&self, o: &Self) -> bool {
        self.algorithm == o.algorithm
            && self.scenario == o.scenario
            && self.backbone == o.backbone
            && self.batch_size == o.batch_size
            && self.seed == o.seed
            && self.best_accuracy.to_bits() == o.best_accuracy.to_bits()
            && self.best_epoch == o.best_epoch
    }
}

impl SweepRow {
    fn for_cell(cfg: &ExperimentConfig) -> Self {
        Self {
            algorithm: cfg.algorithm.to_string(),
            scenario: cfg.scenario.name.clone(),
            backbone: cfg.backbone.name.to_string(),
            batch_size: cfg.batch_size(),
            seed: cfg.seed,
            best_accuracy: f64::NAN,
            best_epoch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub cell: usize,
    pub algorithm: String,
    pub scenario: String,
    pub backbone: String,
    pub batch_size: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// One row per cell, in cell order.
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

/// Runs every cell through `runner`, at most `parallel` at a time. A failing
/// cell becomes a `NaN` row and the remaining cells still run.
pub fn run_sweep<F>(cells: &[ExperimentConfig], parallel: usize, runner: F) -> SweepOutcome
where
    F: Fn(usize, &ExperimentConfig) -> Result<RunSummary> + Sync,
{
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<std::result::Result<RunSummary, String>>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..parallel.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                // a panicking cell is recorded like any other failure
                let r = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| runner(i, &cells[i]))) {
                    Ok(r) => r.map_err(|e| e.to_string()),
                    Err(_) => Err("cell panicked".to_string()),
                };
                if let Err(msg) = &r {
                    log::warn!("sweep cell {i} failed: {msg}");
                }
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("workers joined");
    let mut rows = Vec::with_capacity(cells.len());
    let mut failures = Vec::new();
    for (i, (cfg, r)) in cells.iter().zip(results).enumerate() {
        let mut row = SweepRow::for_cell(cfg);
        match r.expect("every cell ran") {
            Ok(s) => {
                row.best_accuracy = s.best_accuracy;
                row.best_epoch = Some(s.best_epoch);
            }
            Err(error) => failures.push(SweepFailure {
                cell: i,
                algorithm: row.algorithm.clone(),
                scenario: row.scenario.clone(),
                backbone: row.backbone.clone(),
                batch_size: row.batch_size,
                seed: row.seed,
                error,
            }),
        }
        rows.push(row);
    }
    SweepOutcome { rows, failures }
}

/// Best accuracies with algorithms as rows and the varied settings as
/// columns, averaged over seeds. Cells with no finite value are `NaN`.
#[derive(Debug, Clone)]
pub struct PivotTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl PartialEq for PivotTable {
    fn eq(&self, o: &Self) -> bool {
        self.columns == o.columns
            && self.rows.len() == o.rows.len()
            && self.rows.iter().zip(&o.rows).all(|((a, x), (b, y))| {
                a == b && x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }
}

impl PivotTable {
    pub fn from_rows(rows: &[SweepRow]) -> Self {
        let vary = |f: &dyn Fn(&SweepRow) -> String| {
            let first = rows.first().map(f);
            rows.iter().any(|r| Some(f(r)) != first)
        };
        let (vs, vb, vz) = (
            vary(&|r| r.scenario.clone()),
            vary(&|r| r.backbone.clone()),
            vary(&|r| r.batch_size.to_string()),
        );
        let label = |r: &SweepRow| {
            let mut parts = Vec::new();
            if vs {
                parts.push(format!("scenario={}", r.scenario));
            }
            if vb {
                parts.push(format!("backbone={}", r.backbone));
            }
            if vz {
                parts.push(format!("batch_size={}", r.batch_size));
            }
            if parts.is_empty() {
                "best_accuracy".to_string()
            } else {
                parts.join(";")
            }
        };
        let mut columns: Vec<String> = Vec::new();
        let mut algorithms: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in rows {
            let col = label(r);
            if !columns.contains(&col) {
                columns.push(col.clone());
            }
            if !algorithms.contains(&r.algorithm) {
                algorithms.push(r.algorithm.clone());
            }
            let entry = cells.entry((r.algorithm.clone(), col)).or_default();
            if r.best_accuracy.is_finite() {
                entry.push(r.best_accuracy);
            }
        }
        let rows = algorithms
            .into_iter()
            .map(|a| {
                let values = columns
                    .iter()
                    .map(|c| match cells.get(&(a.clone(), c.clone())) {
                        Some(v) if !v.is_empty() => v.iter().sum::<f64>() / v.len() as f64,
                        _ => f64::NAN,
                    })
                    .collect();
                (a, values)
            })
            .collect();
        Self { columns, rows }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["algorithm".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (alg, values) in &self.rows {
            let mut rec = vec![alg.clone()];
            rec.extend(values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Percentages with one decimal, for reading by eye.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("| algorithm | {} |\n", self.columns.join(" | "));
        s.push_str(&format!("|---|{}\n", "---|".repeat(self.columns.len())));
        for (alg, values) in &self.rows {
            let cells: Vec<String> = values
                .iter()
                .map(|v| if v.is_finite() { format!("{:.1}", 100.0 * v) } else { "failed".into() })
                .collect();
            s.push_str(&format!("| {alg} | {} |\n", cells.join(" | ")));
        }
        s
    }
}

pub fn read_pivot(path: &Path) -> Result<PivotTable> {
    let mut r = csv::Reader::from_path(path)?;
    let columns: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let alg = rec.get(0).unwrap_or_default().to_string();
        let values = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("table value {v:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != columns.len() {
            return Err(Error::Parse(format!("row {alg} has {} values for {} columns", values.len(), columns.len())));
        }
        rows.push((alg, values));
    }
    Ok(PivotTable { columns, rows })
}

pub fn write_summary(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["algorithm", "scenario", "backbone", "batch_size", "seed", "best_accuracy", "best_epoch"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Runs every cell of `plan` into `out_root/runs` and writes the summary,
/// failure list and pivot table to `out_root`.
pub fn cmd_sweep(plan: &SweepPlan, out_root: &Path, overwrite: bool, parallel: Option<usize>) -> Result<SweepOutcome> {
    let cells = plan.cells()?;
    let runs = out_root.join(RUNS_DIR);
    fs::create_dir_all(&runs)?;
    let parallel = parallel.or(plan.axes.parallel).unwrap_or(1);
    log::info!("sweep: {} cells, {} at a time", cells.len(), parallel);
    let outcome = run_sweep(&cells, parallel, |_, cfg| cmd_run(cfg, None, &runs, overwrite));
    write_summary(&outcome.rows, &out_root.join(SUMMARY_CSV))?;
    let mut w = csv::Writer::from_path(out_root.join(FAILURES_CSV))?;
    for f in &outcome.failures {
        w.serialize(f)?;
    }
    w.flush()?;
    let table = PivotTable::from_rows(&outcome.rows);
    table.write_csv(&out_root.join(TABLE_CSV))?;
    let mut md = fs::File::create(out_root.join(TABLE_MD))?;
    md.write_all(table.to_markdown().as_bytes())?;
    Ok(outcome)
}
