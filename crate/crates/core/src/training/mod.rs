//! Optimisation: AdamW, the noise-prediction training step and the
//! checkpointed training loop.

mod config;
mod fit;
mod optim;
mod pipeline;
mod step;

pub use config::TrainConfig;
pub use fit::{fit, FitReport, TrainState};
pub use optim::{AdamW, AdamWConfig};
pub use pipeline::{copy_baseline, masked_frame_mse, INTERP_STRENGTH};
pub use step::{
    batch_indices, batch_loss, prepare_batch, train_step, DiffusionModel, PreparedBatch, TrainingSet,
};
