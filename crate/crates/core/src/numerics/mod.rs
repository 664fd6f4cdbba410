//! Dense tensors, reverse-mode differentiation and gradient checking.

pub mod grad_check;
mod graph;
mod io;
mod tensor;

pub use grad_check::{grad_check, grad_check_many};
pub use graph::{softmax, Elementwise, Gradients, Graph, Var};
pub use io::{load_tensor, save_tensor};
pub use tensor::Tensor;
