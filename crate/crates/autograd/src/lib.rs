//! Minimal define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar output walks the tape in exact reverse order and
//! returns the gradient of every leaf that was registered with
//! [`Tape::leaf`]. Tapes are cheap to build and are rebuilt on every
//! optimization step; nothing is cached between iterations.
//!
//! The engine is generic over [`Scalar`] so the same program can run in `f32`
//! for bulk fitting and in `f64` for gradient checks.

mod check;
mod error;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use check::{grad_check, numeric_gradient, relative_error, GradCheckReport, GRAD_CHECK_FLOOR};
pub use error::{AutogradError, Result};
pub use optim::{cosine_lr, Adam, AdamConfig, ParamSet};
pub use scalar::Scalar;
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
