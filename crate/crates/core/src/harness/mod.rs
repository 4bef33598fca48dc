//! Toy experiments comparing plain adapters, static depth penalties and
//! gated, coordinated adapters on identical data, seeds and optimiser.

mod config;
mod report;
mod task;
mod train;

pub use config::{ExperimentConfig, PenaltyWeights, TaskKind, Variant};
pub use report::{render_report, summarize, ReportRow};
pub use task::{select_columns, ToyTask};
pub use train::{
    inference_path, run_experiment, total_loss, train, Checkpoint, FlopBreakdown, MergedNetwork,
    Network, Overhead, ParamCounts, Recorded, RunResult, TrainedRun, CHECKPOINT_VERSION,
    CSV_HEADER,
};
