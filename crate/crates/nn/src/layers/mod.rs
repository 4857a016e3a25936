mod activation;
mod conv;
mod linear;
mod norm;
mod shape;

pub use activation::{LeakyRelu, Relu, Sigmoid, Tanh};
pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;
pub use norm::BatchNorm;
pub use shape::Reshape;
