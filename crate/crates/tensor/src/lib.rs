//! Dense tensors and a recording tape for reverse-mode differentiation.
//!
//! The op set is deliberately narrow: matrix products, softmax, layer norm,
//! GELU, depthwise and strided convolutions, bilinear upsampling and the
//! shape plumbing between token sequences and feature maps. Apart from
//! [`Graph::bias_add`] nothing broadcasts.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod ops;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use ops::conv_out_len;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
