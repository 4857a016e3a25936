use crate::layer::{count_call, join, Layer, LayerInfo, LayerKind, Param};
use crate::{Scalar, Tensor};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Batch normalization over the channel axis of `[N, C, ...]` tensors.
///
/// Training uses batch statistics and updates exponential running averages
/// (unbiased variance); inference uses the running averages.
pub struct BatchNorm<T> {
    channels: usize,
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Param<T>,
    running_var: Param<T>,
    cache: Option<NormCache<T>>,
}

struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::full(&[channels], T::one())),
            cache: None,
        }
    }

    /// (batch, spatial size) for a `[N, C, ...]` input.
    fn dims(&self, x: &Tensor<T>) -> (usize, usize) {
        let s = x.shape();
        assert!(s.len() >= 2 && s[1] == self.channels, "batch norm expects [N, {}, ...], got {s:?}", self.channels);
        (s[0], s[2..].iter().product())
    }
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        count_call();
        let (n, spatial) = self.dims(x);
        let eps = T::from_f64_lossy(EPS);
        let mut y = x.clone();
        let data = y.data_mut();
        for c in 0..self.channels {
            let scale = self.gamma.value.data()[c] / (self.running_var.value.data()[c] + eps).sqrt();
            let shift = self.beta.value.data()[c] - self.running_mean.value.data()[c] * scale;
            for i in 0..n {
                let off = (i * self.channels + c) * spatial;
                for v in &mut data[off..off + spatial] {
                    *v = *v * scale + shift;
                }
            }
        }
        y
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        count_call();
        let (n, spatial) = self.dims(x);
        let count = n * spatial;
        let momentum = T::from_f64_lossy(MOMENTUM);
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_stds = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let mut sum = 0.0f64;
            for i in 0..n {
                let off = (i * self.channels + c) * spatial;
                sum += x.data()[off..off + spatial].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            }
            let mean = sum / count as f64;
            let mut sq = 0.0f64;
            for i in 0..n {
                let off = (i * self.channels + c) * spatial;
                sq += x.data()[off..off + spatial].iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>();
            }
            let var = sq / count as f64;
            let inv_std = T::from_f64_lossy(1.0 / (var + EPS).sqrt());
            let mean_t = T::from_f64_lossy(mean);
            let (g, b) = (self.gamma.value.data()[c], self.beta.value.data()[c]);
            for i in 0..n {
                let off = (i * self.channels + c) * spatial;
                for k in off..off + spatial {
                    let h = (x.data()[k] - mean_t) * inv_std;
                    xhat.data_mut()[k] = h;
                    y.data_mut()[k] = h * g + b;
                }
            }
            inv_stds.push(inv_std);
            let unbiased = if count > 1 { var * count as f64 / (count - 1) as f64 } else { var };
            let rm = &mut self.running_mean.value.data_mut()[c];
            *rm = (T::one() - momentum) * *rm + momentum * mean_t;
            let rv = &mut self.running_var.value.data_mut()[c];
            *rv = (T::one() - momentum) * *rv + momentum * T::from_f64_lossy(unbiased);
        }
        self.cache = Some(NormCache { xhat, inv_std: inv_stds });
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.as_ref().expect("batch norm: backward before forward");
        let (n, spatial) = self.dims(grad);
        let count = T::from_usize(n * spatial).expect("count");
        let mut dx = Tensor::zeros(grad.shape());
        for c in 0..self.channels {
            let g = self.gamma.value.data()[c];
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                let off = (i * self.channels + c) * spatial;
                for k in off..off + spatial {
                    let dy = grad.data()[k];
                    sum_dy += dy;
                    sum_dy_xhat += dy * cache.xhat.data()[k];
                }
            }
            self.gamma.grad.data_mut()[c] += sum_dy_xhat;
            self.beta.grad.data_mut()[c] += sum_dy;
            let scale = g * cache.inv_std[c] / count;
            for i in 0..n {
                let off = (i * self.channels + c) * spatial;
                for k in off..off + spatial {
                    dx.data_mut()[k] = scale * (count * grad.data()[k] - sum_dy - cache.xhat.data()[k] * sum_dy_xhat);
                }
            }
        }
        dx
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn describe(&self, prefix: &str, out: &mut Vec<LayerInfo>) {
        out.push(LayerInfo { path: prefix.to_string(), kind: LayerKind::BatchNorm { channels: self.channels } });
    }
}
