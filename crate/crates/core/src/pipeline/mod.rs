//! Training, inference, fusion and experiment orchestration.

mod experiment;
mod inference;
mod optim;
mod train;

pub use experiment::{
    load_run_reports, preprocess_cases, quantile_csv, run_experiment, run_experiment_with_log, synthesize_cases,
    ExperimentConfig, ExperimentOutcome, ExperimentSummary, PhantomBlock, RunMode, SectionSummary, TrainBlock,
    TrainedModel, DEFAULT_HGG_FRACTION, SUMMARY_CSV_HEADER,
};
pub use inference::{
    fuse_views, predict_slices, predict_volume, ProbabilityVolume, Provenance, Stage, PROBABILITY_BLOB,
    PROBABILITY_MANIFEST,
};
pub use optim::{sgd_step, OptimizerState};
pub use train::{fold_cases, smooth, train, train_with_progress, validation_wt_dice, TrainConfig};
