//! Define-by-run reverse-mode differentiation.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use tape::{Gradients, Tape, Var, Vjp};
