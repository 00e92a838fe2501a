//! Baseline training and the active-learning loop: leave-one-user-out
//! baselines, pool/test splits, acquisition sessions, eta sweeps and timing.

mod bench;
mod experiment;
mod plan;
pub mod results;
mod session;
mod train;

pub use bench::{bench_timing, TimingReport};
pub use experiment::{run_incremental, sweep, user_split, BaselineRecord, CellRecord, SweepResult};
pub use plan::{AcquisitionMode, ExperimentPlan, FineTuneData};
pub use session::{RetrainJob, RetrainOutcome, Session, SessionInit, TaskError};
pub use train::{
    config_for, evaluate, held_out_users, predict_classes, source_windows, split_pool_test,
    train_baseline, train_baseline_loocv, train_epochs, Baseline,
};
