//! End-to-end training and evaluation: cross-entropy pretraining, FGR
//! fine-tuning (or from-scratch FGR), evaluation grids, ablations, sweeps.

mod config;
mod dataset;
mod evaluate;
mod experiments;
mod train;

pub use config::{lr_at, milestones, Mode, Stage1Config, TrainConfig};
pub use dataset::{Dataset, Manifest, SplitCounts, SPLITS};
pub use evaluate::{
    evaluate, evaluate_split, fit_run_temperature, predict_logits, read_csv, write_csv, EvalReport, MetricsRow, Summary,
};
pub use experiments::{run_ablation, sweep, AblationRow, SweepParam, SweepRow};
pub use train::{
    batch_grads, encode_features, encode_images, finetune_fgr, finetune_fgr_encoded, model_for, run_fgr, train_scratch,
    train_stage1, EpochSummary, Encoded, RunResult, StepLog, Trained, NON_DEGRADATION_TOL,
};
