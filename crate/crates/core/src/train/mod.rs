//! Optimization loop, Adam, and checkpoints.

mod adam;
mod checkpoint;
mod config;
mod trainer;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
pub use config::{LrSchedule, TrainConfig};
pub use trainer::{checkpoint_path, EpochSampler, LossRecord, Trainer};
