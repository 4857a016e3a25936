use crate::layer::{count_call, Layer, LayerInfo, LayerKind};
use crate::{Scalar, Tensor};

macro_rules! pointwise {
    ($(#[$meta:meta])* $name:ident, $kind:expr, |$x:ident| $f:expr, |$xin:ident, $y:ident| $df:expr) => {
        $(#[$meta])*
        #[derive(Default)]
        pub struct $name<T> {
            input: Option<Tensor<T>>,
            output: Option<Tensor<T>>,
        }

        impl<T: Scalar> $name<T> {
            pub fn new() -> Self {
                Self { input: None, output: None }
            }
        }

        impl<T: Scalar> Layer<T> for $name<T> {
            fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
                count_call();
                x.map(|$x| $f)
            }

            fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
                let y = self.infer(x);
                self.input = Some(x.clone());
                self.output = Some(y.clone());
                y
            }

            fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
                let input = self.input.as_ref().expect("activation: backward before forward");
                let output = self.output.as_ref().expect("activation: backward before forward");
                let mut dx = grad.clone();
                for ((d, &$xin), &$y) in dx.data_mut().iter_mut().zip(input.data()).zip(output.data()) {
                    *d *= $df;
                }
                dx
            }

            fn describe(&self, prefix: &str, out: &mut Vec<LayerInfo>) {
                out.push(LayerInfo { path: prefix.to_string(), kind: $kind });
            }
        }
    };
}

pointwise!(
    /// `max(x, 0)`.
    Relu, LayerKind::Relu,
    |x| if x > T::zero() { x } else { T::zero() },
    |x, _y| if x > T::zero() { T::one() } else { T::zero() }
);

pointwise!(
    /// Leaky rectifier with negative slope 0.2.
    LeakyRelu, LayerKind::LeakyRelu,
    |x| if x > T::zero() { x } else { x * T::from_f64_lossy(0.2) },
    |x, _y| if x > T::zero() { T::one() } else { T::from_f64_lossy(0.2) }
);

pointwise!(
    Tanh, LayerKind::Tanh,
    |x| x.tanh(),
    |_x, y| T::one() - y * y
);

pointwise!(
    Sigmoid, LayerKind::Sigmoid,
    |x| T::one() / (T::one() + (-x).exp()),
    |_x, y| y * (T::one() - y)
);
