//! Group advantages, the advantage-weighted SFT loss and the training loop.

pub mod adamw;
pub mod advantage;
pub mod sft;
pub mod train;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use advantage::{group_advantage, AdvantageTable, DEFAULT_ADVANTAGE_EPS};
pub use sft::{member_noise_seed, weighted_sft_loss, AdvantageMode, TrainGroup, TrainMember, TrainingSet};
pub use train::{train, LogRecord, Objective, Snapshot, TrainConfig, TrainFailure, TrainRun};
