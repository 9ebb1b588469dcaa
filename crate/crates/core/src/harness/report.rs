use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{MetricRecord, METRICS_CSV};

pub const ACCURACY_FIGURE: &str = "accuracy_vs_epoch.svg";
pub const A_DISTANCE_FIGURE: &str = "a_distance_vs_epoch.svg";
pub const REPORT_TABLE: &str = "report.csv";

/// Metric rows that parsed cleanly, plus how many were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
    pub dropped: usize,
}

/// Reads a metric CSV. Rows with missing or non-finite required fields are
/// dropped and counted; a missing file or header is an error.
pub fn read_metric_csv(path: &Path) -> Result<MetricLog> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = ["epoch", "train_loss_total", "train_loss_ce", "train_loss_da", "target_accuracy"];
    let idx: Vec<usize> = required
        .iter()
        .map(|n| col(n).ok_or_else(|| Error::Parse(format!("{}: missing column {n}", path.display()))))
        .collect::<Result<_>>()?;
    let (wall, bal, f1, ad) = (col("wall_seconds"), col("balanced_accuracy"), col("macro_f1"), col("a_distance"));
    let mut records = Vec::new();
    let mut dropped = 0;
    for rec in r.records() {
        let Ok(rec) = rec else {
            dropped += 1;
            continue;
        };
        let num = |i: usize| rec.get(i).and_then(|v| v.trim().parse::<f64>().ok()).filter(|v| v.is_finite());
        let opt = |i: Option<usize>| i.and_then(num);
        let epoch = rec.get(idx[0]).and_then(|v| v.trim().parse::<usize>().ok());
        match (epoch, num(idx[1]), num(idx[2]), num(idx[3]), num(idx[4])) {
            (Some(epoch), Some(total), Some(ce), Some(da), Some(acc)) => records.push(MetricRecord {
                epoch,
                train_loss_total: total,
                train_loss_ce: ce,
                train_loss_da: da,
                target_accuracy: acc,
                wall_seconds: opt(wall).unwrap_or(0.0),
                balanced_accuracy: opt(bal),
                macro_f1: opt(f1),
                a_distance: opt(ad),
            }),
            _ => dropped += 1,
        }
    }
    Ok(MetricLog { records, dropped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub epochs: usize,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub final_accuracy: f64,
    pub final_a_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub figures: Vec<PathBuf>,
    pub table: PathBuf,
    pub rows: Vec<ReportRow>,
    /// Directories whose log was missing, unreadable or empty, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    pub warnings: Vec<String>,
}

/// Curves and a best-accuracy table over the given run directories.
pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportOutput> {
    fs::create_dir_all(out_dir)?;
    let mut skipped = Vec::new();
    let mut warnings = Vec::new();
    let mut runs: Vec<(String, Vec<MetricRecord>)> = Vec::new();
    for dir in run_dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        match read_metric_csv(&dir.join(METRICS_CSV)) {
            Ok(log) if log.records.is_empty() => {
                log::warn!("{}: no usable metric rows, skipped", dir.display());
                skipped.push((dir.clone(), "no usable metric rows".to_string()));
            }
            Ok(log) => {
                if log.dropped > 0 {
                    let w = format!("{name}: excluded {} rows with missing or non-finite values", log.dropped);
                    log::warn!("{w}");
                    warnings.push(w);
                }
                runs.push((name, log.records));
            }
            Err(e) => {
                log::warn!("{}: skipped ({e})", dir.display());
                skipped.push((dir.clone(), e.to_string()));
            }
        }
    }
    let mut rows = Vec::new();
    for (name, recs) in &runs {
        let best = recs
            .iter()
            .fold(&recs[0], |b, r| if r.target_accuracy > b.target_accuracy { r } else { b });
        let last = recs.last().expect("non-empty");
        rows.push(ReportRow {
            run: name.clone(),
            epochs: recs.len(),
            best_accuracy: best.target_accuracy,
            best_epoch: best.epoch,
            final_accuracy: last.target_accuracy,
            final_a_distance: last.a_distance,
        });
    }
    let table = out_dir.join(REPORT_TABLE);
    let mut w = csv::Writer::from_path(&table)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;

    let mut figures = Vec::new();
    if !runs.is_empty() {
        let series: Vec<Series> = runs
            .iter()
            .map(|(n, recs)| (n.clone(), recs.iter().map(|r| (r.epoch as f64, r.target_accuracy)).collect()))
            .collect();
        let path = out_dir.join(ACCURACY_FIGURE);
        fs::write(&path, line_chart("Target accuracy", "epoch", "accuracy", &series))?;
        figures.push(path);
        let series: Vec<Series> = runs
            .iter()
            .map(|(n, recs)| {
                let pts = recs.iter().filter_map(|r| r.a_distance.map(|a| (r.epoch as f64, a))).collect();
                (n.clone(), pts)
            })
            .filter(|(_, pts): &Series| !pts.is_empty())
            .collect();
        if !series.is_empty() {
            let path = out_dir.join(A_DISTANCE_FIGURE);
            fs::write(&path, line_chart("Proxy A-distance", "epoch", "A-distance", &series))?;
            figures.push(path);
        }
    }
    Ok(ReportOutput {
        figures,
        table,
        rows,
        skipped,
        warnings,
    })
}

pub fn read_report_table(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

type Series = (String, Vec<(f64, f64)>);

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Minimal SVG line chart: axes with five ticks each, one polyline per
/// series and a legend on the right.
fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (760.0, 420.0);
    let (left, right, top, bottom) = (64.0, 200.0, 36.0, 48.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r##"<line x1="{px}" y1="{}" x2="{px}" y2="{}" stroke="black"/><text x="{px}" y="{}" text-anchor="middle">{}</text>"##,
            top + ph,
            top + ph + 5.0,
            top + ph + 18.0,
            format_tick(xv)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{py}" x2="{left}" y2="{py}" stroke="black"/><line x1="{left}" y1="{py}" x2="{}" y2="{py}" stroke="#e0e0e0"/><text x="{}" y="{}" text-anchor="end">{}</text>"##,
            left - 5.0,
            left + pw,
            left - 8.0,
            py + 4.0,
            format_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.8" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = top + 12.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::MetricLogWriter;

    fn record(epoch: usize, acc: f64) -> MetricRecord {
        MetricRecord {
            epoch,
            train_loss_total: 1.0 / epoch as f64,
            train_loss_ce: 0.5,
            train_loss_da: 0.1,
            target_accuracy: acc,
            wall_seconds: 0.0,
            balanced_accuracy: None,
            macro_f1: None,
            a_distance: Some(1.0),
        }
    }

    fn run_dir(root: &Path, name: &str, accs: &[f64]) -> PathBuf {
        let d = root.join(name);
        fs::create_dir_all(&d).unwrap();
        let mut w = MetricLogWriter::create(&d).unwrap();
        for (i, &a) in accs.iter().enumerate() {
            w.append(&record(i + 1, a)).unwrap();
        }
        d
    }

    #[test]
    fn four_runs_give_one_figure_and_table() {
        let root = tempfile::tempdir().unwrap();
        let dirs: Vec<PathBuf> = (0..4).map(|i| run_dir(root.path(), &format!("r{i}"), &[0.2, 0.5, 0.4])).collect();
        let out = cmd_report(&dirs, &root.path().join("report")).unwrap();
        assert_eq!(out.rows.len(), 4);
        assert_eq!(out.rows[0].best_epoch, 2);
        assert_eq!(out.figures.len(), 2);
        let svg = fs::read_to_string(&out.figures[0]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert_eq!(read_report_table(&out.table).unwrap(), out.rows);
    }

    #[test]
    fn missing_logs_are_skipped_and_nan_rows_excluded() {
        let root = tempfile::tempdir().unwrap();
        let good = run_dir(root.path(), "good", &[0.3, f64::NAN, 0.6]);
        let missing = root.path().join("missing");
        let corrupt = root.path().join("corrupt");
        fs::create_dir_all(&corrupt).unwrap();
        fs::write(corrupt.join(METRICS_CSV), "garbage\n1\n").unwrap();
        let out = cmd_report(&[good, missing.clone(), corrupt], &root.path().join("report")).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].epochs, 2);
        assert_eq!(out.rows[0].best_accuracy, 0.6);
        assert_eq!(out.skipped.len(), 2);
        assert_eq!(out.skipped[0].0, missing);
        assert_eq!(out.warnings.len(), 1);
        let svg = fs::read_to_string(&out.figures[0]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
    }
}
