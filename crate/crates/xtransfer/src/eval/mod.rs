//! Few-shot evaluation harness: the synthetic cross-modality benchmark,
//! task-level metrics, and the transfer-learning / fine-tuning baselines
//! recombined models are compared against.

pub mod baseline;
pub mod metrics;
pub mod task;

pub use baseline::{baseline_ft, baseline_tl, BaselineModel};
pub use metrics::{
    accuracy, atr, overfitting, top1_accuracy, EvalReport, SeedOutcome, DEFAULT_ATR_ALPHA,
};
pub use task::{
    identity_task, make_source_models, make_synthetic_benchmark, make_target_tasks, FewShotTask,
    ModalityDescriptor, SourceSpec, TargetSpec,
};
