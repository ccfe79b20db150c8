//! Tensor core, U-Net scorer, loss and optimizer.

pub mod adam;
pub mod autodiff;
pub mod checkpoint;
pub mod tensor;
pub mod train;
pub mod unet;

pub use adam::{adam_step, OptimizerState};
pub use checkpoint::{load_model, save_model};
pub use tensor::Tensor;
pub use train::{loss_trace_csv, train, train_model, TrainOptions, TrainOutcome};
pub use unet::{loss, Grads, ScorerModel, UNetConfig};
