use rand::Rng;

use crate::im2col::Window;
use crate::layer::{count_call, join, Layer, LayerInfo, LayerKind, Param};
use crate::{init, Scalar, Tensor};

fn check_map<T: Scalar>(x: &Tensor<T>, channels: usize, what: &str) -> (usize, usize, usize) {
    let s = x.shape();
    assert!(s.len() == 4 && s[1] == channels, "{what} expects [N, {channels}, H, W], got {s:?}");
    (s[0], s[2], s[3])
}

/// 2-D convolution over `[N, C, H, W]` batches, weights `[C_out, C_in, k, k]`.
pub struct Conv2d<T> {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    weight: Param<T>,
    bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(in_channels, out_channels, kernel, stride, padding, 1.0, rng)
    }

    pub fn with_gain<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = init::lecun_normal(rng, &[out_channels, in_channels, kernel, kernel], fan_in, gain);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            input: None,
        }
    }

    fn window(&self, h: usize, w: usize) -> Window {
        Window { channels: self.in_channels, height: h, width: w, kernel: self.kernel, stride: self.stride, padding: self.padding }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        count_call();
        let (n, h, w) = check_map(x, self.in_channels, "conv2d");
        let win = self.window(h, w);
        let (oh, ow, npos, plen) = (win.out_height(), win.out_width(), win.positions(), win.patch_len());
        let mut y = Tensor::zeros(&[n, self.out_channels, oh, ow]);
        let mut cols = vec![T::zero(); plen * npos];
        let out_len = self.out_channels * npos;
        for i in 0..n {
            win.im2col(x.item(i), &mut cols);
            let out = &mut y.data_mut()[i * out_len..(i + 1) * out_len];
            for (row, &b) in out.chunks_mut(npos).zip(self.bias.value.data()) {
                row.fill(b);
            }
            T::gemm(self.out_channels, plen, npos, T::one(), self.weight.value.data(), false, &cols, false, T::one(), out);
        }
        y
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("conv2d: backward before forward");
        let (n, h, w) = check_map(x, self.in_channels, "conv2d");
        let win = self.window(h, w);
        let (npos, plen) = (win.positions(), win.patch_len());
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); plen * npos];
        let mut dcols = vec![T::zero(); plen * npos];
        let out_len = self.out_channels * npos;
        let in_len = x.item_len();
        for i in 0..n {
            let dy = &grad.data()[i * out_len..(i + 1) * out_len];
            win.im2col(x.item(i), &mut cols);
            T::gemm(self.out_channels, npos, plen, T::one(), dy, false, &cols, true, T::one(), self.weight.grad.data_mut());
            for (row, db) in dy.chunks(npos).zip(self.bias.grad.data_mut()) {
                *db += row.iter().copied().sum::<T>();
            }
            T::gemm(plen, self.out_channels, npos, T::one(), self.weight.value.data(), true, dy, false, T::zero(), &mut dcols);
            win.col2im(&dcols, &mut dx.data_mut()[i * in_len..(i + 1) * in_len]);
        }
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
            kind: LayerKind::Conv2d {
                in_channels: self.in_channels,
                out_channels: self.out_channels,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            },
        });
    }
}

/// Transposed convolution (learned upsampling), weights `[C_in, C_out, k, k]`.
///
/// Output side is `(H - 1) * stride - 2 * padding + k`; `k = 4, s = 2, p = 1`
/// doubles the resolution.
pub struct ConvTranspose2d<T> {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    weight: Param<T>,
    bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        // Each output pixel receives about in_channels * (k / s)² contributions.
        let fan_in = in_channels * (kernel / stride).max(1).pow(2);
        let weight = init::lecun_normal(rng, &[in_channels, out_channels, kernel, kernel], fan_in, 1.0);
        Self::from_weight(weight, stride, padding)
    }

    /// Per-channel bilinear 2× upsampler (`k = 4, s = 2, p = 1`).
    pub fn bilinear(channels: usize) -> Self {
        Self::from_weight(init::bilinear_upsample(channels, 4), 2, 1)
    }

    fn from_weight(weight: Tensor<T>, stride: usize, padding: usize) -> Self {
        let s = weight.shape().to_vec();
        Self {
            in_channels: s[0],
            out_channels: s[1],
            kernel: s[2],
            stride,
            padding,
            bias: Param::new(Tensor::zeros(&[s[1]])),
            weight: Param::new(weight),
            input: None,
        }
    }

    fn out_side(&self, side: usize) -> usize {
        (side - 1) * self.stride + self.kernel - 2 * self.padding
    }

    /// Geometry of the *output* map; its window positions enumerate input pixels.
    fn window(&self, h: usize, w: usize) -> Window {
        Window {
            channels: self.out_channels,
            height: self.out_side(h),
            width: self.out_side(w),
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

impl<T: Scalar> Layer<T> for ConvTranspose2d<T> {
    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        count_call();
        let (n, h, w) = check_map(x, self.in_channels, "conv_transpose2d");
        let win = self.window(h, w);
        debug_assert_eq!(win.positions(), h * w);
        let (npos, plen) = (h * w, win.patch_len());
        let (oh, ow) = (win.height, win.width);
        let mut y = Tensor::zeros(&[n, self.out_channels, oh, ow]);
        let mut cols = vec![T::zero(); plen * npos];
        let out_len = self.out_channels * oh * ow;
        for i in 0..n {
            T::gemm(plen, self.in_channels, npos, T::one(), self.weight.value.data(), true, x.item(i), false, T::zero(), &mut cols);
            let out = &mut y.data_mut()[i * out_len..(i + 1) * out_len];
            win.col2im(&cols, out);
            for (plane, &b) in out.chunks_mut(oh * ow).zip(self.bias.value.data()) {
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
        y
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("conv_transpose2d: backward before forward");
        let (n, h, w) = check_map(x, self.in_channels, "conv_transpose2d");
        let win = self.window(h, w);
        let (npos, plen) = (h * w, win.patch_len());
        let out_len = self.out_channels * win.height * win.width;
        let in_len = x.item_len();
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); plen * npos];
        for i in 0..n {
            let dy = &grad.data()[i * out_len..(i + 1) * out_len];
            for (plane, db) in dy.chunks(win.height * win.width).zip(self.bias.grad.data_mut()) {
                *db += plane.iter().copied().sum::<T>();
            }
            win.im2col(dy, &mut cols);
            // dW += x colsᵀ ; dx = W cols
            T::gemm(self.in_channels, npos, plen, T::one(), x.item(i), false, &cols, true, T::one(), self.weight.grad.data_mut());
            T::gemm(
                self.in_channels,
                plen,
                npos,
                T::one(),
                self.weight.value.data(),
                false,
                &cols,
                false,
                T::zero(),
                &mut dx.data_mut()[i * in_len..(i + 1) * in_len],
            );
        }
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
            kind: LayerKind::ConvTranspose2d {
                in_channels: self.in_channels,
                out_channels: self.out_channels,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            },
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct-summation convolution, independent of the unfolding path.
    fn direct_conv(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], cout: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut y = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * s + ki) as isize - p as isize;
                                let ix = (ox * s + kj) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ci * h + iy as usize) * w + ix as usize] * wt[((co * cin + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    y[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, &mut rng);
        let x: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64 * 0.3).sin()).collect();
        let t = Tensor::new(vec![1, 2, 5, 6], x.clone());
        let y = conv.infer(&t);
        let want = direct_conv(&x, 2, 5, 6, conv.weight.value.data(), 3, 3, 2, 1);
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_doubles_side_and_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let deconv = ConvTranspose2d::<f64>::new(2, 3, 4, 2, 1, &mut rng);
        let x: Vec<f64> = (0..2 * 4 * 4).map(|i| (i as f64 * 0.7).cos()).collect();
        let xt = Tensor::new(vec![1, 2, 4, 4], x.clone());
        let y = deconv.infer(&xt);
        assert_eq!(y.shape(), &[1, 3, 8, 8]);
        // <deconv(x), z> == <x, conv_W(z)> where conv_W uses the same weights as a [C_in, C_out] conv.
        let z: Vec<f64> = (0..3 * 8 * 8).map(|i| (i as f64 * 0.13).sin()).collect();
        let conv_z = direct_conv(&z, 3, 8, 8, deconv.weight.value.data(), 2, 4, 2, 1);
        let lhs: f64 = y.data().iter().zip(&z).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&conv_z).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn bilinear_upsampler_preserves_constants_in_the_interior() {
        let up = ConvTranspose2d::<f64>::bilinear(1);
        let x = Tensor::full(&[1, 1, 4, 4], 0.5);
        let y = up.infer(&x);
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
        for r in 1..7 {
            for c in 1..7 {
                assert!((y.data()[r * 8 + c] - 0.5).abs() < 1e-12);
            }
        }
    }
}
