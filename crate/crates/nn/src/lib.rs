//! A compact CPU neural-network engine.
//!
//! Tensors are dense `f32` in NHWC layout, convolutions go through im2col
//! and `matrixmultiply`, and every layer has a hand-written backward pass.
//! Batch-norm layers can report the batch statistics they observe and accept
//! gradients with respect to those statistics, which is what statistic
//! matching losses need.

mod layers;
mod network;
pub mod ops;
mod optim;
mod params;
mod tensor;

pub use layers::{BatchNorm, BnStatGrad, BnStats, BnUpdate, Conv2d, Linear, Mode, Node, Residual, Tape};
pub use network::{apply_bn_updates, BackwardOptions, ForwardOptions, ForwardOutput, Network};
pub use optim::{Adam, Sgd};
pub use params::{BufferId, Grads, Init, ParamBuilder, ParamId, ParamStore};
pub use tensor::{argmax, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("flat parameter vector has length {got}, expected {expected}")]
    FlatLength { expected: usize, got: usize },
}
