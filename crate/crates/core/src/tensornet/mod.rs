//! Small f64 tensor engine: the layer set the pose networks need, each with
//! an analytic backward pass, plus Adam and checkpointing.

pub mod checkpoint;
pub mod gradcheck;
mod layers;
mod network;
pub mod ops;
mod optim;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, numeric_gradient, relative_error};
pub use layers::{apply_layer, Layer, LayerKind};
pub use network::{Network, Trace};
pub use optim::Adam;
pub use tensor::{Param, Tensor};
