//! A small grid detector trained with a mean teacher.

pub mod detector;
pub mod loss;
pub mod train;

pub use detector::{GridDetector, PredictConfig};
pub use loss::{
    assign_targets, student_objective, student_step, supervised_loss, weak_loss, Example, LossBreakdown,
    Objective,
};
pub use train::{
    benchmark_data, evaluate, run_benchmark, train, train_observed, DataConfig, EmaSchedule, EpochStats, EvalSummary, NormKind, StepTrace,
    TrainConfig, TrainMode, TrainReport,
};
