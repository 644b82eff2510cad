//! Warmup/cosine schedule, the training loop with validation and early
//! stopping, and checkpoints.

pub mod checkpoint;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint};
pub use schedule::{early_stop, lr_schedule, TrainConfig};
pub use trainer::{setup_digest, BestState, TrainOutcome, TrainState, Trainer};
