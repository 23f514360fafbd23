//! Experiment orchestration: configs, training loops, checkpoints, metrics
//! and sample export.

mod checkpoint;
mod config;
mod export;
mod metrics;
mod runner;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_as, read_manifest, restore_distiller, restore_trainer,
    save_checkpoint, save_distiller, save_trainer, Manifest, CHECKPOINT_FORMAT,
};
pub use config::{Config, SCHEMA};
pub use export::{export_samples, ExportFormat};
pub use metrics::{MetricsRecord, MetricsWriter, METRICS_HEADER};
pub use runner::{
    ablate, distill, eval, evaluate_model, run, sample, synthesize, train_teacher, EvalSettings,
    Experiment, RunKind, RunSummary, TrainSettings,
};
