//! Population metrics and pooled spatial cross-validation.

mod cv;
mod metrics;
pub mod stats;

pub use cv::{check_cv_inputs, crossvalidate, split_fold, Pipeline};
pub use metrics::{compute_metrics, MetricsReport, PredictionEntry, PredictionSet};
