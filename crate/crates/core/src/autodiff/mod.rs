//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters enter it through
//! [`ParamSet::bind`], gradients come back as a [`GradMap`] keyed by name.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_directional, relative_error, GradCheckReport, ABS_FLOOR};
pub use params::{accumulate, zero_grads, Bound, GradMap, Param, ParamSet};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
