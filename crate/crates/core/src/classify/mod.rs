//! SAL-assisted two-stage object classification.
//!
//! Stage 1 scores all classes from pooled context features; stage 2 trains
//! dedicated binary models for the most confused class pairs, one branch on
//! full frames and one on SAL crops, and arbitrates with a tiny ensemble.

pub mod pqr;
pub mod stage1;
pub mod stage2;

pub use pqr::{apply_pqr, fit_pqr, PqrTransform};
pub use stage1::{predict_stage1, train_stage1, Stage1Config, Stage1Model};
pub use stage2::{
    confusion_sets, select_confusion_sets, train_pair_model, train_pair_models,
    two_stage_evaluate, ConfusionSet, PairDecisions, PairModel, SetReport, Stage2Config,
    StrategyOutcome, TwoStageReport,
};
