//! Dense tensors, a recording tape, and a finite-difference checker.

mod gradcheck;
mod tape;
mod value;

pub use gradcheck::{
    grad_check, grad_check_many, grad_check_with, rel_error, GradCheckReport, Stencil,
};
pub use tape::{Axis, Gradients, ParamId, Tape, Var};
pub use value::Tensor;
