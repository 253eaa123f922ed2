//! Experiment orchestration: configuration, the outer training loop,
//! evaluation, diagnostic checks and metrics files.

mod check;
mod config;
mod eval;
mod metrics;
mod train;

pub use check::{run_check, CheckKind, CheckReport, Measurement};
pub use config::{
    apply_override, EvaluationConfig, ExperimentConfig, MetricsConfig, StrategyKind, SweepConfig, TrainingConfig,
    WeightingConfig,
};
pub use eval::{evaluate, evaluate_tasks, EvalSummary};
pub use metrics::{emit_curve, emit_metrics, ema, metrics_rows, read_metrics, MetricsRow, METRICS_HEADER};
pub use train::{seeded_rng, train, IterationRecord, SeedStream, TrainLog, TrainOutcome, Trainer};
