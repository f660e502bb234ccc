//! Ranking and regression metrics, data splits and the statistics used to
//! compare runs.

mod metrics;
mod splits;
mod stats;
mod theory;

pub use metrics::{
    confusion_metrics, enrichment_factor, pr_auc, regression_metrics, roc_auc, write_metric_csv, MetricBundle, MetricRow,
    RegressionMetrics,
};
pub use splits::{stratified_kfold, temporal_split, SplitPlan, TemporalSplit};
pub use stats::{bonferroni, ln_gamma, one_way_anova_f, paired_t_test, regularized_incomplete_beta, student_t_cdf, TTest};
pub use theory::{excess_risk_decomposition, ExcessRisk, JointTable};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("both classes must be present")]
    OneClassOnly,
    #[error("no positive labels")]
    NoPositives,
    #[error("degenerate variance")]
    DegenerateVariance,
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("row {0} has no year")]
    MissingYear(usize),
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("length mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

fn check_len(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::Shape(a, b));
    }
    Ok(())
}
