//! Minimal reverse-mode automatic differentiation over rank-4 `f64` arrays.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! are methods on the tape that take and return [`Var`] handles; calling
//! [`Tape::backward`] on a scalar loss fills gradients for every handle
//! that depends on a gradient-carrying leaf. Model parameters live in a
//! [`ParamStore`] and are bound onto each fresh tape with [`Tape::param`].
//!
//! Tapes are single-threaded. Distinct tapes share nothing and may be used
//! from different threads.

mod conv;
pub mod gradcheck;
mod ops;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use ops::{sigmoid, Axis};
pub use optim::{adam_step, poly_lr, Adam, AdamConfig, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS, DEFAULT_LR};
pub use params::{ParamStore, CHECKPOINT_MAGIC};
pub use rng::Rng;
pub use tape::{Backward, Tape, Var};
pub use tensor::{Shape, Tensor};
