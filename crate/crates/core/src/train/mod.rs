//! Optimization loop, schedule, checkpoints, evaluation and prediction.

mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{lr_at, TrainConfig};
pub use optim::AdamW;
pub use trainer::{evaluate, predict, train, train_on, write_npy, EpochLog, TrainOutcome};

use crate::model::BgiNet;
use crate::Scalar;

/// Trainable element count.
pub fn count_params<T: Scalar>(model: &BgiNet<T>) -> usize {
    model.num_params()
}
