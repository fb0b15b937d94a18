//! Dense f64 tensors, reverse-mode differentiation and a finite-difference checker.

mod gradcheck;
mod graph;
mod params;
pub(crate) mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, FD_STEP, REL_FLOOR};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use params::{ParamStore, Parameter};
pub use tensor::{logsumexp, softmax_rows, Tensor};
