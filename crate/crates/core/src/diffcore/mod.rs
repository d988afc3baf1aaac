//! Reverse-mode differentiation over dense arrays, plus a finite-difference
//! oracle for checking it.

mod gradcheck;
mod graph;
mod params;
mod real;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var, NEG_LARGE};
pub use params::{Init, Param, ParamId, ParamStore, WeightScale, INIT_STD};
pub use real::Real;
pub use tensor::Tensor;

/// Variance epsilon of layer normalization.
pub const LN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
