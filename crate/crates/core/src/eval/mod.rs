//! Evaluation: classification metrics, Welch t-tests, decadal anomaly
//! counts and the supervised top-k feature classifier.

pub mod classifier;
pub mod decadal;
pub mod metrics;
pub mod ttest;

pub use classifier::{
    classify, classify_topk, compare_rankings, ranking_from_names, ClassifierConfig,
};
pub use decadal::{decadal_counts, period_counts, DecadalRow};
pub use metrics::{metrics, pr_auc, roc_auc, MetricsReport};
pub use ttest::{welch_ttest, TTestResult};
