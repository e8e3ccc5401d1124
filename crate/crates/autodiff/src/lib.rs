//! Tape-based reverse-mode automatic differentiation for small networks.
//!
//! Gradients are recorded as ordinary tape nodes, which makes them
//! differentiable again: Hessian-vector products and gradients of
//! input-gradient penalties come from the same mechanism.

pub mod error;
pub mod kernels;
pub mod objective;
pub mod param;
pub mod tape;
pub mod tensor;

pub use error::{AdError, Result};
pub use objective::{forward, hvp, record_params, value_and_gradient, Objective, Recording};
pub use param::{Layout, ParamVector, Segment};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
