//! Minimal dense-tensor math with reverse-mode autodiff.
//!
//! Everything is built on row-major [`Tensor`]s over either `f32` or `f64`.
//! Differentiable computations are recorded on a [`Graph`]: each op pushes its
//! output value together with a closure that routes the upstream gradient to
//! the op's parents. All reductions run in a fixed order, so repeated runs on
//! the same inputs are bit-identical.

mod gemm;
mod graph;
pub mod ops;
mod param;
mod scalar;
mod tensor;

pub use gemm::{gemm, gemm_abt, gemm_atb};
pub use graph::{GradSink, Graph, Var};
pub use ops::{sigmoid_scalar, softplus_inverse, softplus_scalar, STANDARDIZE_EPS};
pub use param::{Param, ParamGroup, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
