//! A small CPU layer engine: dense tensors, convolution / transposed
//! convolution via patch unfolding and GEMM, batch normalization, and the
//! Adam optimizer. Every layer implements its backward pass explicitly.

mod im2col;
pub mod init;
mod layer;
pub mod layers;
mod optim;
mod scalar;
mod tensor;

pub use im2col::Window;
pub use layer::{join, primitive_calls, zero_grad, Layer, LayerInfo, LayerKind, Param, Residual, Sequential};
pub use optim::{Adam, AdamConfig, Moments};
pub use scalar::Scalar;
pub use tensor::Tensor;
