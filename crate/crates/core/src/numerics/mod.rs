//! Differentiable numeric kernel: tensors, the autodiff tape, parameter
//! storage, Adam, and the finite-difference gradient checker.

pub mod flops;
mod gradcheck;
mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, CoordFailure, GradCheckReport, FD_STEP, GRAD_SCALE_FLOOR};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use real::{MatView, Real};
pub use tape::{Fault, Gradients, Tape, Var};
pub use tensor::Tensor;

pub use tape::{gelu_value, sigmoid};

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Floor applied before every logarithm of an energy.
pub const LOG_FLOOR: f64 = 1e-12;
