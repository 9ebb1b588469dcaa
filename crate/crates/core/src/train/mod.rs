//! Combined-objective training: configuration with per-algorithm recipes,
//! the optimiser, cycling loaders and the epoch loop.

mod config;
mod engine;
mod loader;
mod optim;

pub use config::{
    Algorithm, DiscriminatorSpec, ExperimentConfig, LrSchedule, MetricOptions, Recipe, ScenarioKind, ScenarioSpec,
};
pub use engine::{
    build_model, cross_entropy, load_scenario, matrix_hash, read_metric_log, run_experiment, total_loss, MetricLogWriter,
    MetricRecord, RunOutput, ScenarioData, StepLosses, TapRecord, TrainState, Trainer, BEST_CHECKPOINT,
    FINAL_CHECKPOINT, METRICS_CSV, METRICS_JSONL,
};
pub use loader::CyclingLoader;
pub use optim::Sgd;
