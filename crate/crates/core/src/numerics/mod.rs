//! Minimal dense reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass; calling
//! [`Tape::backward`] walks it in reverse. Learnable values live in a
//! [`ParamStore`] and enter a tape through [`Tape::param`]; frozen parameters
//! enter as constants and never receive gradients, although gradients still
//! flow *through* them to earlier trainable values.
//!
//! Broadcasting is limited to leading-batch expansion: the right operand of
//! `add`/`mul` may have a shape equal to a suffix of the left operand's shape.

mod gradcheck;
mod params;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckEntry, GradCheckReport, REL_ERR_FLOOR};
pub use params::{GradSet, ParamGroup, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
