//! Platform-side metrics on holdout predictions and cross-job comparison.

mod metrics;
mod report;
mod wilcoxon;

pub use metrics::{
    auc, classification_report, cohens_kappa, log_loss, parse_predictions, regression_report,
    ClassificationMetrics, Confusion, Metric, MetricSet, PredictionRow, RegressionMetrics,
    CLASSIFICATION_METRICS, LOG_LOSS_EPS, REGRESSION_METRICS,
};
pub use report::{MetricReport, MetricRow};
pub use wilcoxon::{compare_jobs, signed_rank_test, Direction, TestResult, MIN_PAIRS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no prediction matches a labeled user")]
    EmptyJoin,
    #[error("score {score} for user {user_id} is outside [0, 1]")]
    ScoreOutOfRange { user_id: String, score: f64 },
    #[error("invalid label value {0}")]
    InvalidLabel(String),
    #[error("negative count {0} in confusion matrix")]
    NegativeCount(i64),
    #[error("malformed predictions: {0}")]
    Malformed(String),
    #[error("jobs were tested on different course sets")]
    CourseSetMismatch,
    #[error("unknown metric {0}")]
    UnknownMetric(String),
    #[error("too few non-zero pairs: {found} (need {needed})")]
    TooFewPairs { found: usize, needed: usize },
}
