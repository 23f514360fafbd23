//! Procedural datasets, the closed-form Gaussian teacher, and the sample
//! distances used for evaluation.

mod dataset;
mod metrics;
mod oracle;

pub use dataset::{draw_samples, make_dataset, Dataset, DatasetKind, DATASET_MAGIC};
pub use metrics::{
    frechet_gaussian_distance, sliced_wasserstein, t_uniformity_stat, MetricReport,
    UniformityReport, DEFAULT_PROJECTIONS, UNIFORMITY_BINS,
};
pub use oracle::{analytic_teacher_eps, AnalyticTeacher};
