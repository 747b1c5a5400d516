//! Minimal reverse-mode differentiation engine.
//!
//! Provides the primitive set the network needs (matmul, broadcast add/mul,
//! concat, slice, reshape, permute, gather, ReLU, softmax, layer norm,
//! max/mean reductions, squared error and Chamfer distance), attention and
//! transformer layers on top of them, Adam, and a finite-difference checker.

mod adam;
mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod suite;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_steps, relative_error, GradCheckReport, Probe};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, ParamGrads, ParamStore};
pub use suite::{primitive_suite, SuiteEntry, FD_EPS, LAYER_TOL, PRIMITIVE_TOL};
pub use tensor::{Real, Tensor};
