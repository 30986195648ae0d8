//! Dense tensors with tape-based reverse-mode differentiation.

pub mod gradcheck;
mod nn_ops;
mod ops;
mod tape;
mod tensor;

pub use nn_ops::{
    batch_norm, conv2d, conv_out_len, cross_entropy, dropout, layer_norm, max_pool2d, softmax,
    BatchNormOptions, RunningStats,
};
pub use ops::{broadcast_shape, concat};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};
