//! A small tape-based reverse-mode autodiff engine.
//!
//! Values are dense row-major `f64` tensors, images use NCHW layout. A
//! [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns
//! the accumulated gradients. Parameters are registered with a tag and an
//! offset into a flat parameter vector so gradients can be gathered back
//! into the same flat layout.

mod conv;
mod gemm;
mod graph;
mod tensor;

pub use graph::{sigmoid, softplus, Gradients, Graph, ParamTag, Var};
pub use tensor::Tensor;

pub mod kernels {
    //! Raw numeric kernels, exposed for testing and for callers that do not
    //! need a tape.
    pub use crate::conv::{col2im, conv_out_len, im2col};
    pub use crate::gemm::gemm;
}
