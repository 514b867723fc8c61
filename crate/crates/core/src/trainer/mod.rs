//! Parameters, optimization, and checkpoint persistence.

mod checkpoint;
mod optim;
mod params;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{clip_grad_norm, global_grad_norm, AdamW, Optimizer, Sgd};
pub use params::{init_params, param_layout, ModelParams, ParamSpec};
pub use train::{
    eval_set, evaluate, score, thread_count, train, train_step, training_batch, LogRow, StepStats, TrainConfig,
    TrainLog, TrainOutcome, LOG_HEADER, THREADS_ENV,
};
