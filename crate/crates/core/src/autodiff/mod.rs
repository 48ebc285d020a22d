//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the operations the ensemble and its losses need are provided:
//! convolution, ReLU, 2×2 average pooling, global average pooling,
//! channel concatenation and dense layers, plus a few scalar helpers for
//! building test objectives.

mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, Coordinates, GradCheckReport, Objective, TapeObjective};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
