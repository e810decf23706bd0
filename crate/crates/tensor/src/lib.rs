//! Dense N-D tensors with a tape-based reverse-mode autodiff engine, sized
//! for the convolutional networks of the LV quantification pipeline.
//!
//! Layout is channel-first: `[batch, channels, spatial...]` with one to
//! three spatial axes.

pub mod container;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod params;
pub mod pool;
pub mod scalar;
pub mod tensor;

pub use conv::{ConvSpec, Padding};
pub use error::{Result, TensorError};
pub use graph::{BatchNormMode, BatchNormState, CustomOp, Gradients, Graph, Var};
pub use init::he_normal;
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore, StatUpdate};
pub use pool::PoolSpec;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Batchnorm constants used throughout the networks.
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;
