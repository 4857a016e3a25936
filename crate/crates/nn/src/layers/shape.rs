use crate::layer::{Layer, LayerInfo, LayerKind};
use crate::{Scalar, Tensor};

/// Reshapes each batch item to `shape` (the batch dimension is kept).
pub struct Reshape {
    shape: Vec<usize>,
    input_shape: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), input_shape: None }
    }

    /// Flattens `[N, ...]` to `[N, F]`.
    pub fn flatten(features: usize) -> Self {
        Self::new(&[features])
    }

    fn target(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend_from_slice(&self.shape);
        s
    }
}

impl<T: Scalar> Layer<T> for Reshape {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clone().reshape(&self.target(x.batch()))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input_shape = Some(x.shape().to_vec());
        <Self as Layer<T>>::infer(self, x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let shape = self.input_shape.as_ref().expect("reshape: backward before forward");
        grad.clone().reshape(shape)
    }

    fn describe(&self, prefix: &str, out: &mut Vec<LayerInfo>) {
        out.push(LayerInfo { path: prefix.to_string(), kind: LayerKind::Reshape { shape: self.shape.clone() } });
    }
}
