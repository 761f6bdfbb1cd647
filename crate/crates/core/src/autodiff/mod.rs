//! Reverse-mode automatic differentiation on a per-graph tape, with
//! optionally differentiable gradients (`create_graph`) so objectives can
//! be built on top of gradients themselves.

mod finite_diff;
mod graph;
pub mod value;

pub use finite_diff::finite_difference_gradient;
pub use graph::{GradMap, Graph, Primitive, Tensor, L2_EPS};
pub use value::Value;
