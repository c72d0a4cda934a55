//! Minimal numerical engine: tensors, dense/conv/pool/dropout layers with
//! exact backpropagation, losses, Adam with step decay, checkpoints and
//! model accounting.

mod adam;
mod checkpoint;
mod layers;
mod loss;
mod network;
mod stats;
mod tensor;

pub use adam::{AdamScalars, AdamState};
pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};
pub use layers::{dropout, Activation, Conv2d, Dense, Dropout, MaxPool2, Mode};
pub use loss::{mse_loss, softmax2, xent_loss, Loss, PROB_CLAMP};
pub use network::{Gradients, Layer, LayerSpec, Network, Tape};
pub use stats::{model_stats, ModelStats};
pub use tensor::{Real, Tensor};
