//! Training loop, experiments and run artifacts.

pub mod config;
pub mod experiments;
pub mod runner;
pub mod train;

pub use config::{RunConfig, TrainConfig};
pub use experiments::{
    audit, report, report_csv, robustness_csv, run_robustness, run_sweep, sweep_csv, ReportRow,
    RobustnessRow, SweepGrid, SweepRow,
};
pub use train::{
    evaluate, metrics_csv, train, EvalResult, MetricsRow, ModelSetup, Parallelism, TrainOptions,
    TrainOutcome,
};
