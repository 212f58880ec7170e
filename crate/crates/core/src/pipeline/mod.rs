//! Few-shot training, zero-shot evaluation, the ablation harness and the
//! gradient check.

pub mod ablation;
pub mod artifacts;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod train;

pub use ablation::{ablation_csv, run_ablation, variant_label, variants, AblationRow};
pub use eval::{evaluate, evaluate_predictor, EvalResult, Model, VocabularyMode};
pub use experiment::{run_experiment, run_seed, shots_csv, shots_curve, RunReport, SeedReport, ShotRow, Stats, Summary};
pub use gradcheck::{grad_check, jitter, GradCheckReport, GroupCheck};
pub use train::{loss_and_grad, train_few_shot, StepResult, TrainBatch, TrainConfig, TrainOutcome};
