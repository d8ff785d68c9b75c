//! Metrics, clinical quantities, the paired t-test, and loop-based oracles
//! and finite-difference checks used to verify the tensor implementations.

pub mod gradcheck;
pub mod metrics;
pub mod oracle;
pub mod stats;

pub use gradcheck::{fd_gradient_check, GradCheck};
pub use metrics::{
    clinical_metrics, confusion_metrics, mean_std, threshold, Clinical, Confusion, MetricsRecord,
};
pub use stats::{paired_t_test, TTest};
