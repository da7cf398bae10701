//! Tracking metrics and the clinical measurement pipeline.

pub mod ablation;
pub mod clinical;
pub mod metrics;

pub use ablation::{ablation_run, AblationAxis, AblationReport, AblationRow, AblationSetup};
pub use clinical::{agreement, gls, test_retest, Agreement, GlsSeries, TestRetest};
pub use metrics::{
    average_inference_time, delta_accuracy, delta_avg, mte, EvalFrame, DELTA_THRESHOLDS, EVAL_GRID,
};
