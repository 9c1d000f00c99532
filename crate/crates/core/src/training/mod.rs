//! Optimization, schedules, training loops, checkpoints, metrics and gradient checks.

mod checkpoint;
mod finetune;
mod gradcheck;
mod metrics;
mod optimizer;
mod pretrain;
mod schedule;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, meta_path, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use finetune::{evaluate, finetune, positive_scores, write_finetune_history, FinetuneConfig, FinetuneOutcome, FinetuneRecord};
pub use gradcheck::{check_gradients, grad_check_finetune, grad_check_pretrain, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use metrics::{binary_metrics, binary_metrics_lenient, confusion, roc_auc, Confusion, Metrics};
pub use optimizer::AdamW;
pub use pretrain::{pretrain, write_pretrain_history, PretrainConfig, PretrainOutcome, StepRecord};
pub use schedule::{layer_lr_scales, lr_at};
