//! Dense `f64` tensors and a small reverse-mode differentiation tape.
//!
//! The op set is exactly what the flow model needs: broadcasting elementwise
//! arithmetic, a handful of activations, 2-D convolution, channel
//! concat/narrow, space-to-depth, average pooling, reductions and small
//! matrix products.

mod error;
pub mod gradcheck;
mod graph;
pub mod io;
mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_grad, finite_diff_jacobian, relative_error};
pub use graph::{log_sigmoid, sigmoid, Binary, Gradients, Graph, Unary, Var};
pub use io::{read_tensor, write_tensor, DType};
pub use tensor::Tensor;
