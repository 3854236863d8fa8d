//! Dense tensors and reverse-mode automatic differentiation.

mod array;
mod gradcheck;
pub mod kernels;
pub mod ops;
mod scalar;
mod tape;

pub use array::Tensor;
pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use ops::{cross_entropy_logits, log_softmax, matmul, rms_norm, softmax};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
