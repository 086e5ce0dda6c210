//! Minimal reverse-mode automatic differentiation.
//!
//! [`Graph`] records primitives eagerly; [`gradcheck`] compares its
//! gradients against central finite differences.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_many, probe, relative_error, GradcheckConfig, GradcheckReport};
pub use graph::{BackwardFn, Graph, Var};
pub use tensor::Tensor;
