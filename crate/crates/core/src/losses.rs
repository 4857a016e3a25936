//! Reconstruction and adversarial objectives.
//!
//! Each loss has a value function and, where training needs it, a gradient
//! with respect to its first argument.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_euc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_adv: 1e-3, lambda_euc: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_adv) || !ok(self.lambda_euc) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {self:?}")));
        }
        if self.lambda_adv == 0.0 && self.lambda_euc == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

/// How the pixel term is reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EuclideanForm {
    /// Mean over the batch of per-image mean squared differences.
    #[default]
    Mse,
    /// Mean over the batch of per-image `l2` norms of the difference.
    Norm,
}

fn check_batch(pred: usize, target: usize, batch: usize) -> Result<usize> {
    if pred != target || batch == 0 || !pred.is_multiple_of(batch) {
        return Err(Error::Shape(format!("loss inputs of {pred} and {target} values cannot form {batch} equal images")));
    }
    Ok(pred / batch)
}

/// Pixel loss of `batch` equally sized images stored back to back.
pub fn euclidean_loss(pred: &[f32], target: &[f32], batch: usize, form: EuclideanForm) -> Result<f64> {
    let per = check_batch(pred.len(), target.len(), batch)?;
    let sums = pred.chunks(per).zip(target.chunks(per)).map(|(p, t)| {
        p.iter().zip(t).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum::<f64>()
    });
    Ok(match form {
        EuclideanForm::Mse => sums.sum::<f64>() / pred.len() as f64,
        EuclideanForm::Norm => sums.map(f64::sqrt).sum::<f64>() / batch as f64,
    })
}

/// Gradient of [`euclidean_loss`] with respect to `pred`.
pub fn euclidean_grad(pred: &[f32], target: &[f32], batch: usize, form: EuclideanForm) -> Result<Vec<f32>> {
    let per = check_batch(pred.len(), target.len(), batch)?;
    Ok(match form {
        EuclideanForm::Mse => {
            let scale = 2.0 / pred.len() as f64;
            pred.iter().zip(target).map(|(&a, &b)| (scale * (f64::from(a) - f64::from(b))) as f32).collect()
        }
        EuclideanForm::Norm => pred
            .chunks(per)
            .zip(target.chunks(per))
            .flat_map(|(p, t)| {
                let norm = p.iter().zip(t).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum::<f64>().sqrt();
                let scale = if norm > 0.0 { 1.0 / (norm * batch as f64) } else { 0.0 };
                p.iter().zip(t).map(move |(&a, &b)| (scale * (f64::from(a) - f64::from(b))) as f32)
            })
            .collect(),
    })
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    values.sum::<f64>() / n as f64
}

fn check_probs(values: &[f32]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Shape("no discriminator outputs".into()));
    }
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Numeric("discriminator output outside [0, 1]".into()));
    }
    Ok(())
}

/// `-mean(ln d_real) - mean(ln(1 - d_fake))`.
pub fn discriminator_loss(d_real: &[f32], d_fake: &[f32]) -> Result<f64> {
    check_probs(d_real)?;
    check_probs(d_fake)?;
    let real = mean(d_real.iter().map(|&p| -clamp_prob(p.into()).ln()));
    let fake = mean(d_fake.iter().map(|&p| -(1.0 - clamp_prob(p.into())).ln()));
    Ok(real + fake)
}

/// Gradients of [`discriminator_loss`] with respect to `d_real` and
/// `d_fake`; zero where the clamp is active.
pub fn discriminator_grads(d_real: &[f32], d_fake: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let (nr, nf) = (d_real.len() as f64, d_fake.len() as f64);
    let real = d_real.iter().map(|&p| clamped_grad(p, |p| -1.0 / (p * nr))).collect();
    let fake = d_fake.iter().map(|&p| clamped_grad(p, |p| 1.0 / ((1.0 - p) * nf))).collect();
    (real, fake)
}

/// Non-saturating generator loss `-mean(ln d_fake)`.
pub fn generator_adv_loss(d_fake: &[f32]) -> Result<f64> {
    check_probs(d_fake)?;
    Ok(mean(d_fake.iter().map(|&p| -clamp_prob(p.into()).ln())))
}

pub fn generator_adv_grad(d_fake: &[f32]) -> Vec<f32> {
    let n = d_fake.len() as f64;
    d_fake.iter().map(|&p| clamped_grad(p, |p| -1.0 / (p * n))).collect()
}

fn clamped_grad(p: f32, f: impl Fn(f64) -> f64) -> f32 {
    let p = f64::from(p);
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        0.0
    } else {
        f(p) as f32
    }
}

/// `lambda_adv * adv + lambda_euc * euc`; the adversarial term is skipped
/// entirely when its weight is zero.
pub fn total_loss(euc: f64, adv: f64, weights: &LossWeights) -> f64 {
    let pixel = weights.lambda_euc * euc;
    if weights.lambda_adv == 0.0 {
        pixel
    } else {
        weights.lambda_adv * adv + pixel
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euclidean_values() {
        let x = [0.5f32, -0.25, 0.0, 1.0];
        assert_eq!(euclidean_loss(&x, &x, 2, EuclideanForm::Mse).unwrap(), 0.0);
        let shifted: Vec<f32> = x.iter().map(|v| v + 0.1).collect();
        let l = euclidean_loss(&shifted, &x, 2, EuclideanForm::Mse).unwrap();
        assert!((l - 0.01).abs() < 1e-8, "{l}");
        // per-image norms sqrt(2 * 0.01)
        let n = euclidean_loss(&shifted, &x, 2, EuclideanForm::Norm).unwrap();
        assert!((n - 0.02f64.sqrt()).abs() < 1e-7, "{n}");
        assert!(euclidean_loss(&x, &x[..3], 1, EuclideanForm::Mse).is_err());
        assert!(euclidean_loss(&x, &x, 3, EuclideanForm::Mse).is_err());
    }

    #[test]
    fn euclidean_gradients_match_differences() {
        let p = [0.3f32, -0.7, 0.2, 0.9, -0.1, 0.4];
        let t = [0.1f32, -0.2, 0.6, 0.5, 0.0, -0.3];
        for form in [EuclideanForm::Mse, EuclideanForm::Norm] {
            let g = euclidean_grad(&p, &t, 2, form).unwrap();
            for i in 0..p.len() {
                let h = 1e-3f32;
                let (mut a, mut b) = (p, p);
                a[i] += h;
                b[i] -= h;
                let fd = (euclidean_loss(&a, &t, 2, form).unwrap() - euclidean_loss(&b, &t, 2, form).unwrap()) / (2.0 * h as f64);
                assert!((fd - g[i] as f64).abs() < 1e-3, "{form:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn adversarial_values() {
        let d = discriminator_loss(&[0.5], &[0.5]).unwrap();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-9);
        assert!(discriminator_loss(&[1.0], &[0.0]).unwrap() < 1e-6);
        assert!((generator_adv_loss(&[0.5]).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert!(generator_adv_loss(&[1.0]).unwrap() < 1e-6);
        assert!(generator_adv_loss(&[0.0]).unwrap().is_finite());
        assert!(discriminator_loss(&[1.5], &[0.5]).is_err());
    }

    #[test]
    fn adversarial_gradients() {
        let (gr, gf) = discriminator_grads(&[0.25, 0.5], &[0.5]);
        assert!((gr[0] + 2.0).abs() < 1e-6);
        assert!((gr[1] + 1.0).abs() < 1e-6);
        assert!((gf[0] - 2.0).abs() < 1e-6);
        assert_eq!(generator_adv_grad(&[0.5]), vec![-2.0]);
        assert_eq!(generator_adv_grad(&[0.0]), vec![0.0]);
    }

    #[test]
    fn total_combines_linearly() {
        let w = LossWeights { lambda_adv: 1e-3, lambda_euc: 1.0 };
        assert!((total_loss(0.01, 0.69, &w) - 0.01069).abs() < 1e-12);
        let pure = LossWeights { lambda_adv: 0.0, lambda_euc: 1.0 };
        assert_eq!(total_loss(0.123456789, f64::INFINITY, &pure), 0.123456789);
        assert!(LossWeights { lambda_adv: 0.0, lambda_euc: 0.0 }.validate().is_err());
        assert!(LossWeights { lambda_adv: -1.0, lambda_euc: 1.0 }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
