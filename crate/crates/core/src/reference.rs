//! Published full-scale accuracies (percent), kept for side-by-side tables.
//! They need ImageNet-scale backbones and licensed data; nothing in this
//! crate reproduces them.

/// Office31 transfer tasks in column order.
pub const OFFICE31_TASKS: [&str; 6] = ["A→W", "D→W", "W→D", "A→D", "D→A", "W→A"];

/// DSAN with a ResNet-50 backbone, per task in [`OFFICE31_TASKS`] order.
pub const OFFICE31_DSAN: [f64; 6] = [93.6, 98.3, 100.0, 90.2, 73.5, 74.8];
pub const OFFICE31_DSAN_AVG: f64 = 88.4;

/// The same backbone trained on source labels only.
pub const OFFICE31_NO_DA: [f64; 6] = [68.4, 96.7, 99.3, 68.9, 62.5, 60.7];
pub const OFFICE31_NO_DA_AVG: f64 = 76.1;

/// DSAN best accuracy on COVID-19 CT scans, as `(batch_size, accuracy)`.
pub const COVID_DSAN_BY_BATCH: [(usize, f64); 3] = [(16, 91.2), (8, 88.7), (4, 83.3)];

/// Mean of a row, rounded to one decimal like the published tables.
pub fn row_average(row: &[f64]) -> f64 {
    (row.iter().sum::<f64>() / row.len() as f64 * 10.0).round() / 10.0
}
