//! Dense `f64` tensors, a reverse-mode tape and a central-difference checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, Coords, DEFAULT_EPS};
pub use graph::{AttnSpec, Dropout, Graph, Var};
pub use tensor::{euclidean, Tensor};
