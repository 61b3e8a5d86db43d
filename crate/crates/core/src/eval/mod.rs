//! AUC ROC per class with its averages, the kNN embedding probe, and PCA.

mod auc;
mod knn;
mod pca;
mod report;

pub use auc::{aggregate, auc_roc, class_auc, ScoredCase};
pub use knn::{default_k_range, knn_probe, KnnResult};
pub use pca::{pca_reduce, Pca};
pub use report::{build_report, report_from_scores, write_embeddings_csv, ClassMetrics, EvalSet, MetricsReport};
