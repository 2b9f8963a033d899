//! Minimal reverse-mode differentiation: tensors, a recording graph, the
//! primitives the networks need, Adam, and a finite-difference checker.

mod adam;
mod conv;
pub mod gradcheck;
mod graph;
mod norm;
mod params;
mod real;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Activation, Gradients, Graph, NormKind, Var, NORM_EPS};
pub use params::{Bound, Param, ParamId, ParamSet, PARAMS_MAGIC, PARAMS_VERSION};
pub use real::Real;
pub use tensor::Tensor;

pub(crate) use params::Reader;
