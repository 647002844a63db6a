//! Fine-tuning: Mixup, warm-up plus cosine schedule, smoothed weighted loss,
//! gradient clipping, AdamW and accuracy-first checkpointing.

mod clip;
mod config;
mod loss;
mod mixup;
mod optim;
mod schedule;
mod state;
mod trainer;

pub use clip::{clip_gradients, clip_scale, clip_tensor_gradients, global_norm, GradientGroup};
pub use config::{DevicePreference, Profile, TrainConfig, FAST_ETA_MAX, FAST_MAX_EPOCHS, FULL_EPOCHS};
pub use loss::{mixed_loss, smoothed_weighted_ce, LossConfig};
pub use mixup::{mix_with, mixup_batch, sample_lambda, MixedBatch, MixupConfig};
pub use optim::{AdamW, OptimizerConfig};
pub use schedule::{learning_rate, ScheduleConfig};
pub use state::{history_csv, should_checkpoint, CheckpointDecision, EpochRecord, TrainerState, HISTORY_HEADER};
pub use trainer::{evaluate, train, Evaluation, TrainResult, BEST_STEM, CONFIG_FILE, HISTORY_FILE};
