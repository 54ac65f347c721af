//! The incremental few-shot protocol: class folds, base and few-shot
//! datasets, the training loop and the single-step and multi-step
//! schedules.

mod method;
mod optim;
mod run;
mod split;
mod trainer;

pub use method::{MethodSpec, ABLATION_LABELS, METHOD_NAMES};
pub use optim::{poly_lr, Sgd};
pub use run::{
    build_fold_data, evaluate, prepare_fsl_dataset, run_base_step, run_experiment, run_fsl_step, run_trial, sample_step_dataset,
    ExperimentResult, FoldData, ProtocolConfig, ProtocolState, RunResult, Setting, StepRecord, VAL_ID_OFFSET,
};
pub use split::{filter_base_dataset, make_folds, relabel_strict, sample_fsl_dataset, ClassSplit};
pub use trainer::{train, IterLoss, TrainJob, TrainLog, TrainerConfig};
