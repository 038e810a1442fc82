//! Forward and backward passes for the layer primitives of the encoder-decoder.
//!
//! Every forward returns its output together with a tape; the matching
//! backward consumes that tape and an upstream gradient of the output's shape.

mod activation;
mod batchnorm;
mod conv;
mod pool;

pub use activation::{linear_activation, linear_backward, relu_backward, relu_forward, ReluTape};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, BatchNormGrads, BatchNormParams, BatchNormTape,
    DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams, ConvTape};
pub use pool::{
    maxpool2x2_backward, maxpool2x2_forward, unpool2x2_backward, unpool2x2_forward, PoolIndices,
    PoolTape, UnpoolTape,
};

/// Whether batch statistics are computed from the batch (and recorded) or read from running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
