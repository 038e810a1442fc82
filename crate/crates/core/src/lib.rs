//! Fully convolutional encoder-decoder networks for cross-modal image synthesis.
//!
//! The crate is self-contained: tensors, layers with hand-written backward
//! passes, SISO/MISO/MIMO graph assembly, structure-preserving losses, SGD with
//! momentum, metrics, synthetic phantom data, checkpointing, and a
//! finite-difference verification harness.

pub mod data;
pub mod error;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod persist;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use scalar::{DType, Scalar};
pub use tensor::{concat_channels, slice_channels, Shape4, Tensor};
