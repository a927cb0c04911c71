//! Dense tensors, reverse-mode differentiation and gradient verification.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheckReport, Stencil, REL_ERROR_FLOOR};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Activation, Axis, Elementwise, Gradients, Tape, Var, ELU_EPSILON};
pub use tensor::Tensor;
