//! Two pre-training stages and joint fine-tuning: task-average batching,
//! Adam with global-norm clipping, centroid refresh, checkpoints and logs.

mod config;
mod corpus;
mod optim;
mod run;
mod sampler;

pub use config::{Stage, TrainConfig};
pub use corpus::TrainCorpus;
pub use optim::{clip_global_norm, Adam, Grads};
pub use run::{
    run_finetune, run_pretrain_stage1, run_pretrain_stage2, run_stage, RunOptions, RunOutcome, StepLog,
    ValidationLog, CHECKPOINT_FILE, METRICS_FILE, VALIDATION_FILE,
};
pub use sampler::{derive_seed, stage1_pairs, task_average_sample, SamplerState, TaskPools};
