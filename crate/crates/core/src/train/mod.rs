//! Optimisation, early stopping and the cross-validation harness.

mod config;
mod optimizer;
mod run;
mod runlog;
mod stop;

pub use config::{config_hash, RunConfig, TrainConfig};
pub use optimizer::{adam_step, AdamConfig, OptimizerState};
pub use run::{
    evaluate, fold_of_records, run_alpha_sweep, run_cv, run_fold, train_epoch, write_curves_csv,
    CvReport, EpochStats, FoldOutcome, FoldSummary, TrainRngs,
};
pub use runlog::{EpochRecord, RunLog};
pub use stop::{should_stop, StopConfig, StopDecision, StopState};
