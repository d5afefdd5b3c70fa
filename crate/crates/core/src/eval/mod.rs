//! Evaluation: pixel metrics, the distortion battery and aggregated
//! reports.

mod distort;
mod metrics;
mod report;

pub use distort::{distort, distort_mask, quant_table, resize_bilinear, resize_nearest, Distortion};
pub use metrics::{f1_at, f1_curve, f1_optimal, pixel_auc, FIXED_THRESHOLD, THRESHOLDS};
pub use report::{
    evaluate, robustness_table, Baseline, DistortionScores, EvalOptions, Localization, Localizer, Metric, MetricsReport,
    ModelLocalizer, Scores, ThresholdMode,
};

use crate::forge::ForgeError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction shape {pred:?} does not match ground truth {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("invalid distortion: {0}")]
    InvalidDistortion(String),
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("report line {line}: {reason}")]
    Report { line: usize, reason: String },
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EvalError>;
