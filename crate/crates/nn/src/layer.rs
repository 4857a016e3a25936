use std::cell::Cell;

use crate::{Scalar, Tensor};

thread_local! {
    static PRIMITIVE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of primitive layer evaluations (training or inference) issued on
/// the current thread since it started.
pub fn primitive_calls() -> u64 {
    PRIMITIVE_CALLS.with(|c| c.get())
}

pub(crate) fn count_call() {
    PRIMITIVE_CALLS.with(|c| c.set(c.get() + 1));
}

/// A named tensor owned by a layer. Buffers (e.g. running statistics) are
/// persisted with the weights but never receive gradients.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad, trainable: true }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Self { value, grad: Tensor::zeros(&[0]), trainable: false }
    }
}

/// Structural description of a primitive layer, used for graph introspection.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Linear { inputs: usize, outputs: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    ConvTranspose2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm { channels: usize },
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Reshape { shape: Vec<usize> },
    /// Marks the end of a residual block (skip connection added here).
    ResidualAdd,
}

impl LayerKind {
    pub fn is_convolution(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::ConvTranspose2d { .. })
    }

    pub fn is_rectifier(&self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::LeakyRelu)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub path: String,
    pub kind: LayerKind,
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A differentiable layer with an explicit backward pass.
///
/// `forward` runs in training mode and caches whatever `backward` needs;
/// `infer` runs in inference mode, leaves the layer untouched and can be
/// called concurrently.
pub trait Layer<T: Scalar>: Send + Sync {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T>;

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T>;

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// input of the most recent `forward` call.
    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T>;

    fn visit_params(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param<T>)) {}

    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param<T>)) {}

    fn describe(&self, prefix: &str, out: &mut Vec<LayerInfo>);
}

/// Zeroes the gradients of every trainable parameter.
pub fn zero_grad<T: Scalar>(layer: &mut dyn Layer<T>) {
    layer.visit_params_mut("", &mut |_, p| {
        if p.trainable {
            p.grad.fill(T::zero());
        }
    });
}

/// Ordered container of named layers.
pub struct Sequential<T> {
    layers: Vec<(String, Box<dyn Layer<T>>)>,
}

impl<T: Scalar> Default for Sequential<T> {
    fn default() -> Self {
        Self { layers: Vec::new() }
    }
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, name: impl Into<String>, layer: impl Layer<T> + 'static) -> Self {
        self.layers.push((name.into(), Box::new(layer)));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut it = self.layers.iter();
        let Some((_, first)) = it.next() else {
            return x.clone();
        };
        let mut h = first.infer(x);
        for (_, layer) in it {
            h = layer.infer(&h);
        }
        h
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut it = self.layers.iter_mut();
        let Some((_, first)) = it.next() else {
            return x.clone();
        };
        let mut h = first.forward(x);
        for (_, layer) in it {
            h = layer.forward(&h);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mut it = self.layers.iter_mut().rev();
        let Some((_, last)) = it.next() else {
            return grad.clone();
        };
        let mut g = last.backward(grad);
        for (_, layer) in it {
            g = layer.backward(&g);
        }
        g
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (name, layer) in &self.layers {
            layer.visit_params(&join(prefix, name), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (name, layer) in &mut self.layers {
            layer.visit_params_mut(&join(prefix, name), f);
        }
    }

    fn describe(&self, prefix: &str, out: &mut Vec<LayerInfo>) {
        for (name, layer) in &self.layers {
            layer.describe(&join(prefix, name), out);
        }
    }
}

/// `y = x + body(x)`.
pub struct Residual<T> {
    body: Sequential<T>,
}

impl<T: Scalar> Residual<T> {
    pub fn new(body: Sequential<T>) -> Self {
        Self { body }
    }
}

impl<T: Scalar> Layer<T> for Residual<T> {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.body.infer(x);
        y.add_assign(x);
        y
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.body.forward(x);
        y.add_assign(x);
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = self.body.backward(grad);
        g.add_assign(grad);
        g
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.body.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.body.visit_params_mut(prefix, f);
    }

    fn describe(&self, prefix: &str, out: &mut Vec<LayerInfo>) {
        self.body.describe(prefix, out);
        out.push(LayerInfo { path: prefix.to_string(), kind: LayerKind::ResidualAdd });
    }
}
