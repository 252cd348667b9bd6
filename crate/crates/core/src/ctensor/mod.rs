//! Real/complex tensors with a reverse-mode tape and a finite-difference checker.

pub mod complex;
mod gemm;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use complex::{
    complex_affine, complex_layernorm, complex_linear, crelu, pearson_project, CVar, ComplexNorm,
    ComplexWeight, PearsonMode,
};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::{ComplexTensor, RealTensor};
