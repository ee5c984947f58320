//! Evaluation metrics and representation-association statistics.

pub mod association;
pub mod features;
pub mod metrics;
pub mod pca;
pub mod plsr;
pub mod probe;
pub mod stats;

pub use association::{behavior_columns, run_association, AssociationConfig, AssociationRow};
pub use features::{layer_features, layer_token_features};
pub use metrics::{auc_score, classification_metrics, evaluate_scores, MetricsReport};
pub use pca::{pca_project, Pca};
pub use plsr::{plsr_regress, PlsrModel};
pub use probe::{linear_probe, LogisticProbe, ProbeConfig};
pub use stats::{age_decorrelate_features, fdr_bh, pearson_r};
