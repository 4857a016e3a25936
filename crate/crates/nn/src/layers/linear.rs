use rand::Rng;

use crate::layer::{count_call, join, Layer, LayerInfo, LayerKind, Param};
use crate::{init, Scalar, Tensor};

/// Batches up to this size skip gemm, whose packing of the transposed
/// weight matrix dominates single-image inference.
const ROW_BY_ROW: usize = 4;

/// Dot product with eight independent partial sums.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ac.remainder().iter().zip(bc.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Fully-connected layer on `[N, in]` batches: `y = x Wᵀ + b`.
pub struct Linear<T> {
    inputs: usize,
    outputs: usize,
    weight: Param<T>,
    bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::with_gain(inputs, outputs, 1.0, rng)
    }

    pub fn with_gain<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let weight = init::lecun_normal(rng, &[outputs, inputs], inputs, gain);
        Self {
            inputs,
            outputs,
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[outputs])),
            input: None,
        }
    }

    fn check(&self, x: &Tensor<T>) {
        assert!(
            x.shape().len() == 2 && x.shape()[1] == self.inputs,
            "linear expects [N, {}], got {:?}",
            self.inputs,
            x.shape()
        );
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        count_call();
        self.check(x);
        let n = x.batch();
        let mut y = Tensor::zeros(&[n, self.outputs]);
        {
            let out = y.data_mut();
            let b = self.bias.value.data();
            for row in out.chunks_mut(self.outputs) {
                row.copy_from_slice(b);
            }
        }
        if n <= ROW_BY_ROW {
            let w = self.weight.value.data();
            for (xs, ys) in x.data().chunks(self.inputs).zip(y.data_mut().chunks_mut(self.outputs)) {
                for (out, row) in ys.iter_mut().zip(w.chunks(self.inputs)) {
                    *out += dot(row, xs);
                }
            }
        } else {
            T::gemm(n, self.inputs, self.outputs, T::one(), x.data(), false, self.weight.value.data(), true, T::one(), y.data_mut());
        }
        y
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("linear: backward before forward");
        let n = x.batch();
        // dW += dyᵀ x
        T::gemm(self.outputs, n, self.inputs, T::one(), grad.data(), true, x.data(), false, T::one(), self.weight.grad.data_mut());
        let db = self.bias.grad.data_mut();
        for row in grad.data().chunks(self.outputs) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        let mut dx = Tensor::zeros(&[n, self.inputs]);
        T::gemm(n, self.outputs, self.inputs, T::one(), grad.data(), false, self.weight.value.data(), false, T::zero(), dx.data_mut());
        dx
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn describe(&self, prefix: &str, out: &mut Vec<LayerInfo>) {
        out.push(LayerInfo {
            path: prefix.to_string(),
            kind: LayerKind::Linear { inputs: self.inputs, outputs: self.outputs },
        });
    }
}
