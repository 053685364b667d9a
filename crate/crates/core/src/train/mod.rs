//! Mini-batch SGD with a plateau learning-rate schedule, sharded gradient
//! computation and resumable checkpoints.

mod checkpoint;
mod config;
mod schedule;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use schedule::{Plateau, Sgd};
pub use trainer::{format_log_csv, train, EpochLog, TrainData, TrainState, Trainer, LOG_CSV_HEADER};
