//! Dense `f32` tensors with a define-by-run tape for reverse-mode
//! differentiation.
//!
//! The operator set is deliberately narrow: 2-D convolution and its
//! transpose, ReLU, global average pooling, elementwise add/mul (with a
//! single-channel broadcast), channel concatenation, and the handful of
//! reductions and losses a small segmentation network needs.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] outside the tape; binding a parameter onto a tape copies its
//! value in, and [`ParamStore::accumulate_grads`] copies gradients back out
//! after [`Tape::backward`].

mod error;
pub mod kernels;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{adam_step, AdamConfig, AdamState, StepDecay};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
