use std::collections::BTreeMap;

use crate::layer::{Layer, Param};
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub first: Tensor<T>,
    pub second: Tensor<T>,
}

/// Adaptive-moment optimizer with bias correction:
///
/// ```text
/// m ← β1 m + (1 − β1) g
/// v ← β2 v + (1 − β2) g²
/// θ ← θ − lr · (m / (1 − β1ᵗ)) / (sqrt(v / (1 − β2ᵗ)) + ε)
/// ```
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn from_state(config: AdamConfig, step: u64, moments: BTreeMap<String, Moments<T>>) -> Self {
        Self { config, step, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments<T>> {
        &self.moments
    }

    /// Applies one update to every trainable parameter of `layer` using the
    /// accumulated gradients.
    pub fn step(&mut self, layer: &mut dyn Layer<T>) {
        self.step_with(|f| layer.visit_params_mut("", f));
    }

    /// Like [`Adam::step`] for models that are not a single layer: `visit`
    /// must hand every parameter, with a stable name, to the callback.
    pub fn step_with(&mut self, visit: impl FnOnce(&mut dyn FnMut(&str, &mut Param<T>))) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
        let (lr, eps) = (T::from_f64_lossy(c.learning_rate), T::from_f64_lossy(c.epsilon));
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        let moments = &mut self.moments;
        visit(&mut |name, p| {
            if !p.trainable {
                return;
            }
            let state = moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: Tensor::zeros(p.value.shape()),
                second: Tensor::zeros(p.value.shape()),
            });
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let m = state.first.data_mut();
            let v = state.second.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}
