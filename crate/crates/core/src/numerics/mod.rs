//! Dense tensors, a reverse-mode tape and a finite-difference checker.

pub mod gradcheck;
pub mod ops;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_gradcheck, GradEntry, GradReport, NamedParam};
pub use ops::{euclidean, l2_normalize, layer_norm, scaled_dot_attention, LN_EPS, NORM_FLOOR};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use suite::{op_gradcheck_suite, suite_ops};
