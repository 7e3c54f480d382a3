//! Two-phase training: pseudo-label pretraining, then plane fine-tuning.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, transfer_groups, Checkpoint, Progress, FORMAT_VERSION};
pub use config::{apply_freeze_policy, group_of, FreezePolicy, OptimizerKind, Phase, TrainConfig, TrainOverrides, GROUPS};
pub use optim::{cosine_lr, OptimConfig, Optimizer, UpdateStats};
pub use trainer::{append_epoch_log, steps_per_epoch, BatchLoss, Counters, EpochLog, StepReport, TrainItem, Trainer};
