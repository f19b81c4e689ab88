//! Dense 2-D tensors and tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_STEP, GRAD_CHECK_TOL};
pub use tape::{Gradients, Tape, ValueId, BCE_EPS};
pub use tensor::{matmul, matmul_seq, transpose, Tensor};
