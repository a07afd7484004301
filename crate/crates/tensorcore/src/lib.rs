//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The engine records, for every op output, its inputs and a backward
//! closure; [`Tensor::backward`] replays them in reverse topological order.
//! Everything the network code needs lives here: broadcasting arithmetic,
//! reductions, shape ops, 1-D/2-D convolutions (including the size-preserving
//! transposed "reverse" convolution), pooling, normalisation layers, a
//! bidirectional GRU stack and multi-head attention.

mod conv;
mod error;
pub mod gradcheck;
pub mod nn;
mod ops;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use params::{ParamEntry, ParamId, ParamStore, Session};
pub use tensor::{GradSink, Tensor};
