//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] evaluates each primitive eagerly as it is recorded and keeps
//! the forward values for the reverse sweep. The primitive set is exactly
//! what the kernels, the unrolled mean-shift loop and the loss need.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use optim::Adam;
pub use tape::{Gradients, NodeId, Tape, PROB_CLAMP};
pub use tensor::Tensor;
