//! Measurement: precision-recall AUC, the experiment matrix and first-layer
//! activation analysis.

pub mod analysis;
pub mod matrix;
pub mod pr;

pub use analysis::{
    activation_overlay, apply_threshold, depth_selectivity, feature_map, selectivity_index, sparsity_match_threshold,
    SelectivityReport, SiteGeometry,
};
pub use matrix::{dataset_fingerprint, evaluate, median, run_matrix, CellSummary, MatrixConfig, RunRecord, RunReport};
pub use pr::{auc, pr_auc, pr_curve, PrCurve};
