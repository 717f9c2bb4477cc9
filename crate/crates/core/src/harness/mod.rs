//! Config-driven training, evaluation, profiling and run comparison.

mod config;
mod eval;
mod metrics;
mod overrides;
mod report;
mod schedule;
mod train;

pub use config::{EpsSchedule, OptimizerConfig, ProfileConfig, RunConfig};
pub use eval::{evaluate, predict_all, report_from_predictions, write_predictions, EvalReport};
pub use metrics::{accuracy, read_metrics, Accuracy, MetricsRow, MetricsWriter, METRICS_CSV_HEADER};
pub use overrides::{apply_override, apply_overrides};
pub use report::{collect_report, format_report, write_report_csv, ReportRow};
pub use schedule::epsilon_schedule;
pub use train::{
    load_data, train, RunSummary, TrainOutcome, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE,
};
