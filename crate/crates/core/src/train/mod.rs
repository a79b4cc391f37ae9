//! Optimization loop, weight averaging, checkpoints and evaluation metrics.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod swa;
mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{lr_at_epoch, Ablation, BalanceStrategy, LrSchedule, TrainConfig};
pub use metrics::{
    auc_binary, compute_auc_micro, compute_mcc, compute_metrics, export_pr_curve, pr_area, pr_curve, write_pr_csv,
    ClassMetrics, ConfusionMatrix, MetricsReport, PrPoint, PrfReport,
};
pub use swa::{swa_average, SwaState};
pub use trainer::{evaluate, run_training, write_epoch_log, EpochRecord, Evaluation, TrainOutcome, EPOCH_LOG_HEADER};

#[cfg(test)]
mod tests;
