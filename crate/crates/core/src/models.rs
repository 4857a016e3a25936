//! Per-stage generator and discriminator graphs.
//!
//! Stage 1 maps the first measurement prefix to an 8x8 thumbnail. Every later
//! stage doubles the resolution of the previous output: an upper branch
//! upscales it with a learned deconvolution, a lower branch predicts a
//! residual from the fused contextual code and fresh measurements, and the
//! two are summed and clamped.

use std::collections::BTreeMap;

use lapran_nn::layers::{BatchNorm, Conv2d, ConvTranspose2d, LeakyRelu, Linear, Relu, Reshape, Sigmoid, Tanh};
use lapran_nn::{Layer, LayerInfo, LayerKind, Param, Residual, Scalar, Sequential, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid_data::BASE_SIDE;
use crate::sensing::SensingConfig;

/// Number of residual blocks in every generator.
pub const RESIDUAL_BLOCKS: usize = 3;

/// Weight gain of the linear residual head; keeps early residuals small so
/// the upscaled input dominates at initialization.
const HEAD_GAIN: f64 = 0.1;

/// A knob that is either shared by every stage or listed per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerStage<T> {
    Uniform(T),
    Stages(Vec<T>),
}

impl<T: Copy> PerStage<T> {
    /// Value for `stage` (1-based); a short list repeats its last entry.
    pub fn get(&self, stage: usize) -> T {
        match self {
            PerStage::Uniform(v) => *v,
            PerStage::Stages(list) => list[(stage - 1).min(list.len() - 1)],
        }
    }

    fn is_empty(&self) -> bool {
        matches!(self, PerStage::Stages(list) if list.is_empty())
    }
}

/// Architecture knobs, as found in the `[model]` config section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_filters: PerStage<usize>,
    /// Channels of the feature map the fused vector is reshaped into.
    pub fused_map_channels: PerStage<usize>,
    pub residual_filters: PerStage<usize>,
    /// Filters of the first discriminator convolution; doubled per layer.
    pub disc_filters: PerStage<usize>,
    pub conv_kernel: usize,
    /// Feed measurements into stages 2 and up; off gives the
    /// super-resolution ablation.
    pub fusion: bool,
    /// Append the stage measurements to the discriminator's features.
    pub condition_discriminator: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_filters: PerStage::Uniform(64),
            fused_map_channels: PerStage::Uniform(64),
            residual_filters: PerStage::Uniform(64),
            disc_filters: PerStage::Uniform(64),
            conv_kernel: 3,
            fusion: true,
            condition_discriminator: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, knob) in [
            ("encoder_filters", &self.encoder_filters),
            ("fused_map_channels", &self.fused_map_channels),
            ("residual_filters", &self.residual_filters),
            ("disc_filters", &self.disc_filters),
        ] {
            let bad = match knob {
                PerStage::Uniform(v) => *v == 0,
                PerStage::Stages(list) => knob.is_empty() || list.contains(&0),
            };
            if bad {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("model.conv_kernel must be odd, got {}", self.conv_kernel)));
        }
        Ok(())
    }

    pub fn stage_spec(&self, sensing: &SensingConfig, stage: usize) -> Result<StageModelSpec> {
        self.validate()?;
        Ok(StageModelSpec {
            stage,
            channels: sensing.channels(),
            measurement_dim: sensing.stage_dim(stage)?,
            encoder_filters: self.encoder_filters.get(stage),
            fused_map_channels: self.fused_map_channels.get(stage),
            residual_filters: self.residual_filters.get(stage),
            disc_filters: self.disc_filters.get(stage),
            conv_kernel: self.conv_kernel,
            // stage 1 always reads its measurements
            fusion: self.fusion || stage == 1,
            condition_discriminator: self.condition_discriminator,
        })
    }
}

/// Full description of one stage's networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageModelSpec {
    /// 1-based.
    pub stage: usize,
    pub channels: usize,
    /// Measurements per channel, `stage_dims[stage - 1]`.
    pub measurement_dim: usize,
    pub encoder_filters: usize,
    pub fused_map_channels: usize,
    pub residual_filters: usize,
    pub disc_filters: usize,
    pub conv_kernel: usize,
    pub fusion: bool,
    pub condition_discriminator: bool,
}

impl StageModelSpec {
    pub fn output_side(&self) -> usize {
        BASE_SIDE << (self.stage - 1)
    }

    /// Side of the previous stage's output; `None` for stage 1.
    pub fn input_side(&self) -> Option<usize> {
        (self.stage > 1).then(|| self.output_side() / 2)
    }

    /// Length of the concatenated per-channel measurement vector `y_i`.
    pub fn measurement_len(&self) -> usize {
        self.channels * self.measurement_dim
    }

    /// Length of the contextual latent vector; always equals
    /// [`measurement_len`](Self::measurement_len).
    pub fn context_len(&self) -> usize {
        self.measurement_len()
    }

    fn padding(&self) -> usize {
        self.conv_kernel / 2
    }

    fn validate(&self) -> Result<()> {
        if self.stage == 0 || self.stage > 16 {
            return Err(Error::Config(format!("stage index {} out of range", self.stage)));
        }
        if self.channels == 0 || self.measurement_dim == 0 || self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("invalid stage spec {self:?}")));
        }
        Ok(())
    }
}

/// Concatenates the contextual code and the measurements, `[c ; y]`.
pub fn fuse<T: Scalar>(c: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    if c.shape() != y.shape() || c.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "fusion needs equal [N, q] inputs, got context {:?} and measurements {:?}",
            c.shape(),
            y.shape()
        )));
    }
    Ok(Tensor::concat_features(c, y))
}

/// Appends a convolution, batch normalization and ReLU under `names`.
fn conv_bn_relu<T: Scalar>(
    seq: Sequential<T>,
    names: [&str; 3],
    conv: impl Layer<T> + 'static,
    channels: usize,
) -> Sequential<T> {
    seq.push(names[0], conv).push(names[1], BatchNorm::new(channels)).push(names[2], Relu::new())
}

fn residual_block<T: Scalar>(filters: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Residual<T> {
    let p = kernel / 2;
    let body = conv_bn_relu(Sequential::new(), ["conv1", "bn1", "relu1"], Conv2d::new(filters, filters, kernel, 1, p, rng), filters);
    let body = conv_bn_relu(body, ["conv2", "bn2", "relu2"], Conv2d::new(filters, filters, kernel, 1, p, rng), filters);
    Residual::new(body)
}

fn synthesis_tail<T: Scalar>(mut seq: Sequential<T>, spec: &StageModelSpec, rng: &mut ChaCha8Rng) -> Sequential<T> {
    let (r, k) = (spec.residual_filters, spec.conv_kernel);
    for b in 1..=RESIDUAL_BLOCKS {
        seq = seq.push(format!("res{b}"), residual_block(r, k, rng));
    }
    seq.push("head", Conv2d::with_gain(r, spec.channels, k, 1, spec.padding(), HEAD_GAIN, rng))
}

/// Parts of one generator pass.
#[derive(Clone, Debug)]
pub struct StageOutput<T> {
    /// `clamp(pre_clamp, -1, 1)`.
    pub output: Tensor<T>,
    /// `u_i`; `None` at stage 1.
    pub upscaled: Option<Tensor<T>>,
    /// `r_i`; at stage 1 the Tanh output itself.
    pub residual: Tensor<T>,
    /// `u_i + r_i` before clamping.
    pub pre_clamp: Tensor<T>,
}

/// Generator of one stage.
pub struct Generator<T> {
    spec: StageModelSpec,
    upscale: Option<ConvTranspose2d<T>>,
    encoder: Option<Sequential<T>>,
    decoder: Sequential<T>,
    pre_clamp: Option<Tensor<T>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(spec: &StageModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let (c, q, k, p) = (spec.channels, spec.measurement_len(), spec.conv_kernel, spec.padding());
        let (m, r) = (spec.fused_map_channels, spec.residual_filters);
        let out = spec.output_side();
        let generator = match spec.input_side() {
            None => {
                let decoder = Sequential::new()
                    .push("fc", Linear::new(q, m * out * out, rng))
                    .push("reshape", Reshape::new(&[m, out, out]))
                    .push("bn0", BatchNorm::new(m))
                    .push("relu0", Relu::new());
                let decoder = conv_bn_relu(decoder, ["lift", "bn1", "relu1"], Conv2d::new(m, r, k, 1, p, rng), r);
                let decoder = synthesis_tail(decoder, spec, rng).push("tanh", Tanh::new());
                Generator { spec: spec.clone(), upscale: None, encoder: None, decoder, pre_clamp: None }
            }
            Some(side) => {
                let e = spec.encoder_filters;
                let coded = side.div_ceil(2);
                let encoder = conv_bn_relu(Sequential::new(), ["conv1", "bn1", "relu1"], Conv2d::new(c, e, k, 1, p, rng), e);
                let encoder = conv_bn_relu(encoder, ["conv2", "bn2", "relu2"], Conv2d::new(e, e, k, 2, p, rng), e)
                    .push("flatten", Reshape::flatten(e * coded * coded))
                    .push("fc", Linear::new(e * coded * coded, q, rng));
                let decoder = Sequential::new()
                    .push("fc", Linear::new(2 * q, m * side * side, rng))
                    .push("reshape", Reshape::new(&[m, side, side]))
                    .push("bn0", BatchNorm::new(m))
                    .push("relu0", Relu::new());
                let decoder = conv_bn_relu(decoder, ["deconv", "bn1", "relu1"], ConvTranspose2d::new(m, r, 4, 2, 1, rng), r);
                let decoder = synthesis_tail(decoder, spec, rng);
                Generator {
                    spec: spec.clone(),
                    upscale: Some(ConvTranspose2d::bilinear(c)),
                    encoder: Some(encoder),
                    decoder,
                    pre_clamp: None,
                }
            }
        };
        Ok(generator)
    }

    pub fn spec(&self) -> &StageModelSpec {
        &self.spec
    }

    fn check_inputs(&self, prev: Option<&Tensor<T>>, y: &Tensor<T>) -> Result<()> {
        let q = self.spec.measurement_len();
        if y.shape().len() != 2 || y.shape()[1] != q {
            return Err(Error::Shape(format!("stage {} expects [N, {q}] measurements, got {:?}", self.spec.stage, y.shape())));
        }
        match (self.spec.input_side(), prev) {
            (None, None) => Ok(()),
            (None, Some(_)) => Err(Error::Shape("stage 1 takes no previous image".into())),
            (Some(_), None) => Err(Error::Shape(format!("stage {} needs the previous stage's output", self.spec.stage))),
            (Some(s), Some(x)) => {
                let want = [y.shape()[0], self.spec.channels, s, s];
                if x.shape() != want {
                    return Err(Error::Shape(format!("stage {} expects input {want:?}, got {:?}", self.spec.stage, x.shape())));
                }
                Ok(())
            }
        }
    }

    fn measurements_for_fusion(&self, y: &Tensor<T>) -> Tensor<T> {
        if self.spec.fusion {
            y.clone()
        } else {
            Tensor::zeros(y.shape())
        }
    }

    /// Contextual latent vector of the previous output (inference mode).
    pub fn context(&self, prev: &Tensor<T>) -> Result<Tensor<T>> {
        let encoder = self.encoder.as_ref().ok_or_else(|| Error::Shape("stage 1 has no contextual encoder".into()))?;
        let side = self.spec.input_side().expect("stage >= 2");
        if prev.shape().len() != 4 || prev.shape()[1..] != [self.spec.channels, side, side] {
            return Err(Error::Shape(format!("context encoder expects [N, {}, {side}, {side}], got {:?}", self.spec.channels, prev.shape())));
        }
        Ok(encoder.infer(prev))
    }

    /// Inference-mode pass returning all intermediate parts.
    pub fn infer_parts(&self, prev: Option<&Tensor<T>>, y: &Tensor<T>) -> Result<StageOutput<T>> {
        self.check_inputs(prev, y)?;
        Ok(match (prev, &self.upscale, &self.encoder) {
            (Some(x), Some(up), Some(enc)) => {
                let u = up.infer(x);
                let c = enc.infer(x);
                let r = self.decoder.infer(&fuse(&c, &self.measurements_for_fusion(y))?);
                compose(u, r)
            }
            _ => {
                let t = self.decoder.infer(y);
                StageOutput { output: t.clone(), upscaled: None, residual: t.clone(), pre_clamp: t }
            }
        })
    }

    pub fn infer(&self, prev: Option<&Tensor<T>>, y: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer_parts(prev, y)?.output)
    }

    /// Training-mode pass; caches what [`backward`](Self::backward) needs.
    pub fn forward(&mut self, prev: Option<&Tensor<T>>, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_inputs(prev, y)?;
        let fused_y = self.measurements_for_fusion(y);
        Ok(match (prev, &mut self.upscale, &mut self.encoder) {
            (Some(x), Some(up), Some(enc)) => {
                let u = up.forward(x);
                let c = enc.forward(x);
                let r = self.decoder.forward(&fuse(&c, &fused_y)?);
                let parts = compose(u, r);
                self.pre_clamp = Some(parts.pre_clamp);
                parts.output
            }
            _ => {
                self.pre_clamp = None;
                self.decoder.forward(y)
            }
        })
    }

    /// Accumulates parameter gradients for `grad` = dL/d(output). Returns
    /// dL/d(previous image) for stages after the first.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Option<Tensor<T>> {
        let (Some(up), Some(enc)) = (&mut self.upscale, &mut self.encoder) else {
            self.decoder.backward(grad);
            return None;
        };
        let z = self.pre_clamp.as_ref().expect("forward before backward");
        let (lo, hi) = (-T::one(), T::one());
        let dz = grad.zip_map(z, |g, v| if v < lo || v > hi { T::zero() } else { g });
        let dfused = self.decoder.backward(&dz);
        let (dc, _dy) = dfused.split_features(self.spec.context_len());
        let mut dprev = enc.backward(&dc);
        dprev.add_assign(&up.backward(&dz));
        Some(dprev)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(up) = &self.upscale {
            up.visit_params(&lapran_nn::join(prefix, "upscale"), f);
        }
        if let Some(enc) = &self.encoder {
            enc.visit_params(&lapran_nn::join(prefix, "encoder"), f);
        }
        self.decoder.visit_params(&lapran_nn::join(prefix, "decoder"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(up) = &mut self.upscale {
            up.visit_params_mut(&lapran_nn::join(prefix, "upscale"), f);
        }
        if let Some(enc) = &mut self.encoder {
            enc.visit_params_mut(&lapran_nn::join(prefix, "encoder"), f);
        }
        self.decoder.visit_params_mut(&lapran_nn::join(prefix, "decoder"), f);
    }

    pub fn describe(&self, prefix: &str) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        if let Some(up) = &self.upscale {
            up.describe(&lapran_nn::join(prefix, "upscale"), &mut out);
        }
        if let Some(enc) = &self.encoder {
            enc.describe(&lapran_nn::join(prefix, "encoder"), &mut out);
        }
        self.decoder.describe(&lapran_nn::join(prefix, "decoder"), &mut out);
        out
    }
}

fn compose<T: Scalar>(u: Tensor<T>, r: Tensor<T>) -> StageOutput<T> {
    let pre_clamp = u.add(&r);
    let output = pre_clamp.map(|v| v.max(-T::one()).min(T::one()));
    StageOutput { output, upscaled: Some(u), residual: r, pre_clamp }
}

/// DCGAN-style discriminator: stride-2 convolutions down to 4x4, each with
/// batch normalization and leaky rectification, then a linear layer and a
/// sigmoid.
pub struct Discriminator<T> {
    body: Sequential<T>,
    fc: Linear<T>,
    out: Sigmoid<T>,
    side: usize,
    channels: usize,
    features: usize,
    condition_len: usize,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: &StageModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let side = spec.output_side();
        let mut body = Sequential::new();
        let (mut cin, mut s, mut j) = (spec.channels, side, 0);
        let mut cout = spec.disc_filters;
        while s > 4 {
            body = body
                .push(format!("conv{j}"), Conv2d::new(cin, cout, 4, 2, 1, rng))
                .push(format!("bn{j}"), BatchNorm::new(cout))
                .push(format!("act{j}"), LeakyRelu::new());
            cin = cout;
            cout *= 2;
            s /= 2;
            j += 1;
        }
        let features = cin * s * s;
        body = body.push("flatten", Reshape::flatten(features));
        let condition_len = if spec.condition_discriminator { spec.measurement_len() } else { 0 };
        Ok(Discriminator {
            body,
            fc: Linear::new(features + condition_len, 1, rng),
            out: Sigmoid::new(),
            side,
            channels: spec.channels,
            features,
            condition_len,
        })
    }

    fn head_input(&self, h: Tensor<T>, y: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if self.condition_len == 0 {
            return Ok(h);
        }
        let y = y.ok_or_else(|| Error::Shape("conditional discriminator needs measurements".into()))?;
        if y.shape() != [h.shape()[0], self.condition_len] {
            return Err(Error::Shape(format!("discriminator condition must be [N, {}], got {:?}", self.condition_len, y.shape())));
        }
        Ok(Tensor::concat_features(&h, y))
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != [self.channels, self.side, self.side] {
            return Err(Error::Shape(format!(
                "discriminator expects [N, {}, {side}, {side}], got {s:?}",
                self.channels,
                side = self.side
            )));
        }
        Ok(())
    }

    /// Probabilities `[N, 1]`, inference mode.
    pub fn infer(&self, x: &Tensor<T>, y: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.check(x)?;
        let h = self.head_input(self.body.infer(x), y)?;
        Ok(self.out.infer(&self.fc.infer(&h)))
    }

    pub fn forward(&mut self, x: &Tensor<T>, y: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.check(x)?;
        let h = self.body.forward(x);
        let h = self.head_input(h, y)?;
        let logits = self.fc.forward(&h);
        Ok(self.out.forward(&logits))
    }

    /// Gradient with respect to the image input.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let g = self.fc.backward(&self.out.backward(grad));
        let g = if self.condition_len == 0 { g } else { g.split_features(self.features).0 };
        self.body.backward(&g)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.body.visit_params(prefix, f);
        self.fc.visit_params(&lapran_nn::join(prefix, "fc"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.body.visit_params_mut(prefix, f);
        self.fc.visit_params_mut(&lapran_nn::join(prefix, "fc"), f);
    }

    pub fn describe(&self, prefix: &str) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        self.body.describe(prefix, &mut out);
        self.fc.describe(&lapran_nn::join(prefix, "fc"), &mut out);
        self.out.describe(&lapran_nn::join(prefix, "out"), &mut out);
        out
    }
}

/// Where a stage's initial weights came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitProvenance {
    Fresh { seed: u64 },
    Transferred { from_stage: usize, seed: u64 },
}

/// Named parameter tensor stored as `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// All parameters and buffers of one stage's generator (`gen.*`) and
/// discriminator (`disc.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct StageWeights {
    pub spec: StageModelSpec,
    pub provenance: InitProvenance,
    pub tensors: BTreeMap<String, NamedTensor>,
}

impl StageWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Shape(format!("tensor {name}: shape {:?} does not match {} values", t.shape, t.data.len())));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("tensor {name} holds non-finite values")));
            }
        }
        Ok(())
    }

    pub fn generator_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str).filter(|n| n.starts_with("gen."))
    }
}

/// Copied and freshly initialized tensor names of a weight transfer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub from_stage: usize,
    pub to_stage: usize,
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
}

impl TransferReport {
    pub fn copied_fraction(&self) -> f64 {
        let total = self.copied.len() + self.fresh.len();
        if total == 0 {
            0.0
        } else {
            self.copied.len() as f64 / total as f64
        }
    }
}

/// Seed of the initializer stream for a stage.
pub fn init_seed(seed: u64, stage: usize) -> u64 {
    seed ^ (stage as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Generator and discriminator of one stage.
pub struct StageModel<T> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
}

impl<T: Scalar> StageModel<T> {
    /// Fresh initialization from `seed`.
    pub fn new(spec: &StageModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed(seed, spec.stage));
        let generator = Generator::new(spec, &mut rng)?;
        let discriminator = Discriminator::new(spec, &mut rng)?;
        Ok(StageModel { generator, discriminator })
    }

    pub fn from_weights(weights: &StageWeights) -> Result<Self> {
        let mut model = StageModel::new(&weights.spec, 0)?;
        model.load(weights)?;
        Ok(model)
    }

    pub fn spec(&self) -> &StageModelSpec {
        self.generator.spec()
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.generator.visit_params("gen", f);
        self.discriminator.visit_params("disc", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.generator.visit_params_mut("gen", f);
        self.discriminator.visit_params_mut("disc", f);
    }

    pub fn describe(&self) -> Vec<LayerInfo> {
        let mut out = self.generator.describe("gen");
        out.extend(self.discriminator.describe("disc"));
        out
    }

    pub fn export(&self, provenance: InitProvenance) -> StageWeights {
        let mut tensors = BTreeMap::new();
        self.visit_params(&mut |name, p| {
            let data = p.value.data().iter().map(|&v| Scalar::to_f32(v)).collect();
            tensors.insert(name.to_string(), NamedTensor { shape: p.value.shape().to_vec(), data });
        });
        StageWeights { spec: self.spec().clone(), provenance, tensors }
    }

    /// Overwrites every parameter and buffer; names and shapes must match
    /// exactly.
    pub fn load(&mut self, weights: &StageWeights) -> Result<()> {
        if &weights.spec != self.spec() {
            return Err(Error::Shape(format!("weights for {:?} loaded into {:?}", weights.spec, self.spec())));
        }
        let mut seen = 0;
        let mut failure = None;
        self.visit_params_mut(&mut |name, p| {
            match weights.tensors.get(name) {
                Some(t) if t.shape == p.value.shape() => {
                    for (dst, &src) in p.value.data_mut().iter_mut().zip(&t.data) {
                        *dst = <T as Scalar>::from_f32(src);
                    }
                    seen += 1;
                }
                Some(t) => failure = failure.take().or(Some(format!("{name}: shape {:?} vs {:?}", t.shape, p.value.shape()))),
                None => failure = failure.take().or(Some(format!("missing tensor {name}"))),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Shape(msg));
        }
        if seen != weights.tensors.len() {
            return Err(Error::Shape(format!("{} unexpected tensors in weights", weights.tensors.len() - seen)));
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| {
            if p.trainable {
                p.grad.fill(T::zero());
            }
        });
    }
}

/// Fresh weights for `dst_spec` with every tensor whose name and shape match
/// one in `src` copied over.
pub fn transfer_weights(src: &StageWeights, dst_spec: &StageModelSpec, seed: u64) -> Result<(StageWeights, TransferReport)> {
    let fresh = StageModel::<f32>::new(dst_spec, seed)?;
    let mut weights = fresh.export(InitProvenance::Transferred { from_stage: src.spec.stage, seed });
    let mut report = TransferReport { from_stage: src.spec.stage, to_stage: dst_spec.stage, ..TransferReport::default() };
    for (name, tensor) in weights.tensors.iter_mut() {
        match src.tensors.get(name) {
            Some(s) if s.shape == tensor.shape => {
                tensor.data.clone_from(&s.data);
                report.copied.push(name.clone());
            }
            _ => report.fresh.push(name.clone()),
        }
    }
    Ok((weights, report))
}

/// Layers that feed an output directly and so carry no normalization.
pub fn is_output_head(path: &str) -> bool {
    path.ends_with(".head") || path.ends_with(".upscale")
}

/// Every non-head convolution must be followed by batch normalization and
/// then a rectifier. Returns the offending layer paths.
pub fn normalization_violations(layers: &[LayerInfo]) -> Vec<String> {
    let mut bad = Vec::new();
    for (i, info) in layers.iter().enumerate() {
        if !info.kind.is_convolution() || is_output_head(&info.path) {
            continue;
        }
        let bn = layers.get(i + 1).is_some_and(|l| matches!(l.kind, LayerKind::BatchNorm { .. }));
        let act = layers.get(i + 2).is_some_and(|l| l.kind.is_rectifier());
        if !(bn && act) {
            bad.push(info.path.clone());
        }
    }
    bad
}

pub fn residual_block_count(layers: &[LayerInfo]) -> usize {
    layers.iter().filter(|l| l.kind == LayerKind::ResidualAdd).count()
}
