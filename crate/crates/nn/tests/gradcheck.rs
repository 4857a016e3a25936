//! Central finite-difference checks of every layer's backward pass (f64).

use lapran_nn::layers::{BatchNorm, Conv2d, ConvTranspose2d, LeakyRelu, Linear, Relu, Reshape, Sigmoid, Tanh};
use lapran_nn::{zero_grad, Layer, Residual, Sequential, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar probe loss `sum(w ⊙ y)` with fixed random weights `w`.
fn probe(y: &Tensor<f64>, w: &[f64]) -> f64 {
    y.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

fn check(mut net: Sequential<f64>, x: Tensor<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = net.forward(&x);
    let w: Vec<f64> = (0..y.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    zero_grad(&mut net);
    let y = net.forward(&x);
    let dx = net.backward(&Tensor::new(y.shape().to_vec(), w.clone()));

    let h = 1e-6;
    let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs()).max(1e-4);

    // input gradient
    for i in (0..x.numel()).step_by(3) {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (probe(&net.forward(&xp), &w) - probe(&net.forward(&xm), &w)) / (2.0 * h);
        assert!(rel(fd, dx.data()[i]) < 1e-4, "input[{i}]: fd {fd} vs analytic {}", dx.data()[i]);
    }

    // parameter gradients
    let mut names = Vec::new();
    net.visit_params("", &mut |n, p| {
        if p.trainable {
            names.push((n.to_string(), p.grad.clone()));
        }
    });
    for (name, grad) in names {
        for i in (0..grad.numel()).step_by(5) {
            let mut eval = |delta: f64| {
                net.visit_params_mut("", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[i] += delta;
                    }
                });
                let v = probe(&net.forward(&x), &w);
                net.visit_params_mut("", &mut |n, p| {
                    if n == name {
                        p.value.data_mut()[i] -= delta;
                    }
                });
                v
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(rel(fd, grad.data()[i]) < 1e-4, "{name}[{i}]: fd {fd} vs analytic {}", grad.data()[i]);
        }
    }
}

fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn conv_stack_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Sequential::new()
        .push("conv1", Conv2d::new(2, 3, 3, 1, 1, &mut rng))
        .push("bn1", BatchNorm::new(3))
        .push("act1", LeakyRelu::new())
        .push("conv2", Conv2d::new(3, 2, 3, 2, 1, &mut rng))
        .push("act2", Tanh::new());
    check(net, random_input(&[3, 2, 6, 6], 2), 3);
}

#[test]
fn deconv_residual_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let body = Sequential::new()
        .push("conv1", Conv2d::new(3, 3, 3, 1, 1, &mut rng))
        .push("bn1", BatchNorm::new(3))
        .push("relu1", Relu::new());
    let net = Sequential::new()
        .push("deconv", ConvTranspose2d::new(2, 3, 4, 2, 1, &mut rng))
        .push("res", Residual::new(body))
        .push("up", ConvTranspose2d::bilinear(3));
    check(net, random_input(&[2, 2, 3, 3], 5), 6);
}

#[test]
fn dense_head_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = Sequential::new()
        .push("fc1", Linear::new(6, 8, &mut rng))
        .push("reshape", Reshape::new(&[2, 2, 2]))
        .push("bn", BatchNorm::new(2))
        .push("relu", Relu::new())
        .push("flat", Reshape::flatten(8))
        .push("fc2", Linear::new(8, 1, &mut rng))
        .push("sig", Sigmoid::new());
    check(net, random_input(&[4, 6], 8), 9);
}
