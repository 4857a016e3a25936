#![allow(dead_code)]

use lapran::models::{StageModel, StageModelSpec};
use lapran::pyramid_data::ImageTensor;
use lapran::sensing::{build_matrices, Beta, SensingConfig};
use lapran_nn::{Param, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// The 8 -> 16 stage used for gradient checks: one channel, 8 filters
/// everywhere.
pub fn tiny_spec(fusion: bool) -> StageModelSpec {
    StageModelSpec {
        stage: 2,
        channels: 1,
        measurement_dim: 12,
        encoder_filters: 8,
        fused_map_channels: 8,
        residual_filters: 8,
        disc_filters: 8,
        conv_kernel: 3,
        fusion,
        condition_discriminator: false,
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked as f64
    }
}

struct Batch {
    prev: Tensor<f64>,
    y: Tensor<f64>,
    target: Tensor<f64>,
}

/// `mean((o - t)^2) - mean(ln D(o))` in training mode.
fn objective(model: &mut StageModel<f64>, b: &Batch) -> f64 {
    let o = model.generator.forward(Some(&b.prev), &b.y).unwrap();
    let d = model.discriminator.forward(&o, None).unwrap();
    let mse = o.data().iter().zip(b.target.data()).map(|(a, t)| (a - t).powi(2)).sum::<f64>() / o.numel() as f64;
    mse - d.data().iter().map(|p| p.ln()).sum::<f64>() / d.numel() as f64
}

fn analytic(model: &mut StageModel<f64>, b: &Batch) {
    model.zero_grad();
    let o = model.generator.forward(Some(&b.prev), &b.y).unwrap();
    let d = model.discriminator.forward(&o, None).unwrap();
    let n = d.numel() as f64;
    let dd = d.map(|p| -1.0 / (p * n));
    let mut grad = model.discriminator.backward(&dd);
    let scale = 2.0 / o.numel() as f64;
    grad.add_assign(&o.zip_map(&b.target, |a, t| scale * (a - t)));
    model.generator.backward(&grad);
}

fn with_param<R>(model: &mut StageModel<f64>, name: &str, f: impl FnOnce(&mut Param<f64>) -> R) -> R {
    let mut f = Some(f);
    let mut out = None;
    model.visit_params_mut(&mut |n, p| {
        if n == name {
            out = Some((f.take().expect("unique name"))(p));
        }
    });
    out.expect("parameter exists")
}

/// Central differences (`h = 1e-6`) against backpropagation on `samples`
/// random coordinates of the trainable generator and discriminator
/// parameters. A coordinate passes when
/// `|a - n| / max(|a| + |n|, 1e-6) <= tol`.
pub fn gradient_check_tiny_stage(seed: u64, samples: usize, tol: f64) -> GradCheck {
    let spec = tiny_spec(true);
    let mut model = StageModel::<f64>::new(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11ce);
    let batch = 4;
    let b = Batch {
        prev: uniform(&mut rng, &[batch, 1, 8, 8], -0.5, 0.5),
        y: normal(&mut rng, &[batch, spec.measurement_len()]),
        target: uniform(&mut rng, &[batch, 1, 16, 16], -1.0, 1.0),
    };
    analytic(&mut model, &b);
    let mut coords = Vec::new();
    model.visit_params(&mut |name, p| {
        if p.trainable {
            for i in 0..p.value.numel() {
                coords.push((name.to_string(), i, p.grad.data()[i]));
            }
        }
    });
    let h = 1e-6;
    let mut report = GradCheck { checked: 0, passed: 0, worst: 0.0 };
    for _ in 0..samples {
        let (name, i, a) = coords[rng.random_range(0..coords.len())].clone();
        let orig = with_param(&mut model, &name, |p| p.value.data()[i]);
        with_param(&mut model, &name, |p| p.value.data_mut()[i] = orig + h);
        let up = objective(&mut model, &b);
        with_param(&mut model, &name, |p| p.value.data_mut()[i] = orig - h);
        let down = objective(&mut model, &b);
        with_param(&mut model, &name, |p| p.value.data_mut()[i] = orig);
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        report.checked += 1;
        if rel <= tol {
            report.passed += 1;
        }
        report.worst = report.worst.max(rel);
    }
    report
}

/// Smooth single-channel patterns in `[-1, 1]`: a few random plane waves.
pub fn synthetic_images(count: usize, side: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let waves: Vec<[f64; 4]> = (0..3)
                .map(|_| {
                    [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(0.0..6.3), rng.random_range(0.2..0.5)]
                })
                .collect();
            let data = (0..side * side)
                .map(|i| {
                    let (y, x) = ((i / side) as f64, (i % side) as f64);
                    let v: f64 = waves.iter().map(|w| w[3] * (w[0] * x + w[1] * y + w[2]).sin()).sum();
                    v.clamp(-1.0, 1.0) as f32
                })
                .collect();
            ImageTensor::new(1, side, data).unwrap()
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

fn random_image(rng: &mut ChaCha8Rng, channels: usize, side: usize) -> ImageTensor {
    ImageTensor::new(channels, side, (0..channels * side * side).map(|_| rng.random_range(-1.0f32..=1.0)).collect()).unwrap()
}

/// One randomized sensing trial: a random valid config and image pair.
/// Checks prefix nesting bit for bit, linearity and agreement with an
/// explicit row-by-row product, both to `1e-5` relative.
pub fn sensing_trial(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let betas = [Beta::integer(2), Beta::new(3, 2).unwrap(), Beta::integer(3), Beta::integer(4), Beta::new(5, 4).unwrap()];
    let (config, side) = loop {
        let side = [8usize, 16][rng.random_range(0..2)];
        let beta = betas[rng.random_range(0..betas.len())];
        let k = rng.random_range(1..=4);
        let m = rng.random_range(1..=side * side / 4);
        let channels = rng.random_range(1..=3);
        if let Ok(c) = SensingConfig::new(m, beta, k, side * side, channels, rng.random()) {
            break (c, side);
        }
    };
    let n = side * side;
    let matrix = build_matrices(&config);
    let x = random_image(&mut rng, config.channels(), side);
    let z = random_image(&mut rng, config.channels(), side);
    let yx = matrix.encode(&x).map_err(|e| e.to_string())?;
    let yz = matrix.encode(&z).map_err(|e| e.to_string())?;

    let channels = config.channels();
    for stage in 1..config.stages() {
        let (short, long) = (yx.slice(stage).unwrap(), yx.slice(stage + 1).unwrap());
        let (q, q_next) = (short.len() / channels, long.len() / channels);
        for c in 0..channels {
            if long[c * q_next..c * q_next + q] != short[c * q..(c + 1) * q] {
                return Err(format!("seed {seed}: stage {stage} channel {c} is not a prefix of stage {}", stage + 1));
            }
        }
    }
    for stage in 1..=config.stages() {
        let rows = config.stage_dim(stage).unwrap();
        if matrix.stage_matrix(stage).unwrap() != &matrix.full_matrix()[..rows * n] {
            return Err(format!("seed {seed}: stage {stage} operator is not a row prefix"));
        }
    }

    let (a, b) = (rng.random_range(-2.0f32..2.0), rng.random_range(-2.0f32..2.0));
    let mixed: Vec<f32> = x.data().iter().zip(z.data()).map(|(&p, &q)| a * p + b * q).collect();
    let ym = matrix.encode(&ImageTensor::new(config.channels(), side, mixed.clone()).unwrap()).unwrap();
    let full = matrix.full_matrix();
    for c in 0..config.channels() {
        let lhs: Vec<f64> = ym.channel(c).iter().map(|&v| f64::from(v)).collect();
        let rhs: Vec<f64> =
            yx.channel(c).iter().zip(yz.channel(c)).map(|(&p, &q)| f64::from(a) * f64::from(p) + f64::from(b) * f64::from(q)).collect();
        let err = relative_error(&lhs, &rhs);
        if err > 1e-5 {
            return Err(format!("seed {seed}: linearity error {err:e} in channel {c}"));
        }
        let signal = &x.data()[c * n..(c + 1) * n];
        let oracle: Vec<f64> = full.chunks(n).map(|row| row.iter().zip(signal).map(|(r, &s)| r * f64::from(s)).sum()).collect();
        let got: Vec<f64> = yx.channel(c).iter().map(|&v| f64::from(v)).collect();
        let err = relative_error(&got, &oracle);
        if err > 1e-5 {
            return Err(format!("seed {seed}: encode differs from the explicit product by {err:e} in channel {c}"));
        }
    }
    Ok(())
}
