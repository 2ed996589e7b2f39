//! Training, persistence, evaluation, and recipe-driven experiment runs.

pub mod adamw;
pub mod checkpoint;
pub mod eval;
pub mod experiment;
pub mod train;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use checkpoint::{model_digest, Checkpoint, CheckpointKind, CheckpointMeta, TrainingMeta};
pub use eval::{evaluate_instance, evaluate_instances, mean_entropy, sample_completions, EvalConfig, InstanceEval};
pub use experiment::{run_experiment, run_recipe, Recipe};
pub use train::{finetune, prepare, EarlyStop, LrSchedule, TrainConfig, TrainReport};
