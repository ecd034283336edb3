//! Regularized loss, Adam, gradient checking, the staged training schedule and
//! checkpoints.

mod adam;
mod checkpoint;
mod config;
mod gradcheck;
mod objective;
mod schedule;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, TrainMetadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, TrainConfig};
pub use gradcheck::{
    compare_gradients, gradient_check, numeric_gradient, relative_error, GradCheckOptions, GradCheckReport,
    GroupCheck,
};
pub use objective::{example_objective, loss, mean_token_loss};
pub use schedule::{loss_csv, train, train_with_observer, LossRecord};
