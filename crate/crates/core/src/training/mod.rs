//! Optimizer, schedules, and the training pipelines: pretraining, GPT-fit,
//! retro-fit (freeze or unfreeze), and instruction tuning.

mod optim;
mod schedule;
mod sft;
mod trainer;

pub use optim::{adam_step, clip_global_norm, FreezeMask, OptimizerState};
pub use schedule::{lr_at, Schedule};
pub use sft::{
    build_loss_mask, instruction_tune, load_sft_set, save_sft_set, ConversationSample, Role,
    SftHyperparams, SftOutcome, Turn,
};
pub use trainer::{
    gpt_fit, pretrain_gpt, pretrain_items, retrofit, retrofit_items, train_loop, TrainItem,
    TrainOutcome, TrainPlan, ValSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Eval(#[from] crate::evalgen::EvalError),
    #[error(transparent)]
    File(#[from] crate::io::FileError),
    #[error("non-finite gradient for parameter {param} at step {step}; aborting")]
    NonFiniteGradient { param: String, step: u64 },
    #[error(
        "training diverged: loss {loss} stayed above {factor} x initial {initial} for {patience} steps (step {step})"
    )]
    Diverged {
        step: u64,
        loss: f64,
        initial: f64,
        factor: f64,
        patience: u64,
    },
    #[error("no training items (empty dataset or all samples skipped)")]
    NoTrainingItems,
    #[error("conversation sample invalid: {0}")]
    BadConversation(String),
}
