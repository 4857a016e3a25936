//! Weight initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Scalar, Tensor};

/// Normal with variance `gain² / fan_in` (LeCun normal for `gain = 1`).
pub fn lecun_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Transposed-convolution weights (`[C, C, k, k]`) performing per-channel
/// bilinear upsampling by `ceil(k / 2)` (factor 2 for `k = 4`, stride 2, padding 1).
pub fn bilinear_upsample<T: Scalar>(channels: usize, kernel: usize) -> Tensor<T> {
    let factor = kernel.div_ceil(2);
    let center = if kernel % 2 == 1 { factor as f64 - 1.0 } else { factor as f64 - 0.5 };
    let tap = |i: usize| 1.0 - (i as f64 - center).abs() / factor as f64;
    let mut w = Tensor::zeros(&[channels, channels, kernel, kernel]);
    let data = w.data_mut();
    for c in 0..channels {
        for i in 0..kernel {
            for j in 0..kernel {
                data[((c * channels + c) * kernel + i) * kernel + j] = T::from_f64_lossy(tap(i) * tap(j));
            }
        }
    }
    w
}
