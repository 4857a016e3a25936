//! Stage-by-stage adversarial training.
//!
//! Stages train one at a time. Stage `i` sees the eval-mode reconstructions of
//! the frozen stages `1..i` as its input, its own measurement prefix, and the
//! pyramid level `i` as its target. Each batch takes one discriminator step
//! and then one generator step.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use lapran_nn::{Adam, AdamConfig, Moments, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, EuclideanForm, LossWeights};
use crate::models::{
    init_seed, transfer_weights, Generator, InitProvenance, ModelConfig, NamedTensor, StageModel, StageModelSpec,
    StageWeights, TransferReport,
};
use crate::pyramid_data::{build_pyramid, pyramid_side, ImagePyramid, ImageTensor};
use crate::sensing::{MeasurementSet, MultiRateSensingMatrix};
use crate::store;

/// Images per inference batch when running frozen stages.
const INFER_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop after this many epochs without a new best validation MSE.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub euclidean_form: EuclideanForm,
    /// Initialize stage `i >= 2` from stage `i - 1` where shapes allow.
    pub transfer: bool,
    /// Train through this stage (all stages when unset).
    pub stages: Option<usize>,
    /// Set from the `[loss]` section of an experiment config.
    #[serde(skip)]
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            batch_size: 128,
            max_epochs: 100,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            early_stop_patience: 10,
            seed: 0,
            euclidean_form: EuclideanForm::Mse,
            transfer: true,
            stages: None,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("optimizer moments must lie in [0, 1) and epsilon must be positive".into()));
        }
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mse: f64,
    /// `None` when there is no validation data.
    pub val_mse: Option<f64>,
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    /// Quantity used for model selection and early stopping.
    pub fn selection_mse(&self) -> f64 {
        self.val_mse.unwrap_or(self.train_mse)
    }
}

/// Pyramids and nested measurements of a set of images.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    count: usize,
    channels: usize,
    stage_dims: Vec<usize>,
    /// Per stage, `count` contiguous images of that level.
    levels: Vec<Vec<f32>>,
    /// `count x channels x stage_dims[k-1]`.
    measurements: Vec<f32>,
}

impl EncodedDataset {
    pub fn new(images: &[ImageTensor], matrix: &MultiRateSensingMatrix) -> Result<Self> {
        let config = matrix.config();
        let stages = config.stages();
        let side = pyramid_side(stages);
        if config.image_side() != Some(side) {
            return Err(Error::Config(format!(
                "a {stages}-stage pyramid needs {side}x{side} images but the sensing signal has N = {}",
                config.signal_dim()
            )));
        }
        let mut levels = vec![Vec::new(); stages];
        let mut measurements = Vec::with_capacity(images.len() * config.channels() * config.final_dim());
        for chunk in images.chunks(INFER_BATCH) {
            for set in matrix.encode_batch(chunk)? {
                for c in 0..config.channels() {
                    measurements.extend_from_slice(set.channel(c));
                }
            }
            for image in chunk {
                for (dst, level) in levels.iter_mut().zip(build_pyramid(image, stages)?.levels()) {
                    dst.extend_from_slice(level.data());
                }
            }
        }
        Ok(EncodedDataset {
            count: images.len(),
            channels: config.channels(),
            stage_dims: config.stage_dims().to_vec(),
            levels,
            measurements,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn stages(&self) -> usize {
        self.stage_dims.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// All images of pyramid level `stage`, back to back.
    pub fn level(&self, stage: usize) -> &[f32] {
        &self.levels[stage - 1]
    }

    pub fn level_tensor(&self, stage: usize) -> Tensor<f32> {
        let s = pyramid_side(stage);
        Tensor::new(vec![self.count, self.channels, s, s], self.levels[stage - 1].clone())
    }

    /// Stage-`stage` measurement vectors, `count x channels * q`.
    pub fn measurements(&self, stage: usize) -> Vec<f32> {
        let (q, last) = (self.stage_dims[stage - 1], self.stage_dims[self.stages() - 1]);
        self.measurements.chunks(last).flat_map(|ch| ch[..q].iter().copied()).collect()
    }

    pub fn measurement_tensor(&self, stage: usize) -> Tensor<f32> {
        let len = self.channels * self.stage_dims[stage - 1];
        Tensor::new(vec![self.count, len], self.measurements(stage))
    }

    pub fn measurement_set(&self, index: usize) -> MeasurementSet {
        let last = self.stage_dims[self.stages() - 1];
        let per = self.channels * last;
        let side = pyramid_side(self.stages());
        let channels = self.measurements[index * per..(index + 1) * per].chunks(last).map(<[f32]>::to_vec).collect();
        MeasurementSet::from_channels(self.stage_dims.clone(), (self.channels, side, side), channels).expect("consistent shapes")
    }

    pub fn pyramid(&self, index: usize) -> ImagePyramid {
        let levels = (1..=self.stages())
            .map(|stage| {
                let s = pyramid_side(stage);
                let per = self.channels * s * s;
                let data = self.levels[stage - 1][index * per..(index + 1) * per].to_vec();
                ImageTensor::new(self.channels, s, data).expect("consistent shapes")
            })
            .collect();
        ImagePyramid::from_levels(levels).expect("consistent shapes")
    }

    /// Inputs and targets of stage `stage`, with the previous image produced
    /// by running `frozen` (stages `1..stage`) in inference mode.
    pub fn stage_data(&self, stage: usize, frozen: &[&Generator<f32>]) -> Result<StageData> {
        if stage == 0 || stage > self.stages() {
            return Err(Error::Config(format!("stage {stage} out of range 1..={}", self.stages())));
        }
        if frozen.len() + 1 < stage {
            return Err(Error::MissingCheckpoint { stage: frozen.len() + 1, needed_by: stage });
        }
        let prev = if stage == 1 {
            None
        } else {
            let outputs = run_frozen(&frozen[..stage - 1], self)?;
            Some(outputs.into_iter().last().expect("at least one frozen stage"))
        };
        Ok(StageData {
            prev,
            measurements: self.measurement_tensor(stage),
            target: self.level_tensor(stage),
        })
    }
}

/// Outputs of every frozen stage on the whole dataset, in order.
pub fn run_frozen(frozen: &[&Generator<f32>], data: &EncodedDataset) -> Result<Vec<Tensor<f32>>> {
    let ys: Vec<Tensor<f32>> = (1..=frozen.len()).map(|s| data.measurement_tensor(s)).collect();
    let mut outputs: Vec<Vec<f32>> = vec![Vec::new(); frozen.len()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(INFER_BATCH) {
        let mut prev: Option<Tensor<f32>> = None;
        for (s, generator) in frozen.iter().enumerate() {
            let y = gather(&ys[s], chunk);
            let out = generator.infer(prev.as_ref(), &y)?;
            outputs[s].extend_from_slice(out.data());
            prev = Some(out);
        }
    }
    Ok(outputs
        .into_iter()
        .enumerate()
        .map(|(s, d)| {
            let side = pyramid_side(s + 1);
            Tensor::new(vec![data.len(), data.channels(), side, side], d)
        })
        .collect())
}

/// Rows `idx` of a tensor whose first axis indexes items.
pub fn gather(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let per = t.item_len();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(t.item(i));
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// Everything one stage trains or validates on.
#[derive(Clone, Debug)]
pub struct StageData {
    /// Output of the previous frozen stage; `None` for stage 1.
    pub prev: Option<Tensor<f32>>,
    pub measurements: Tensor<f32>,
    pub target: Tensor<f32>,
}

impl StageData {
    pub fn len(&self) -> usize {
        self.target.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, idx: &[usize]) -> (Option<Tensor<f32>>, Tensor<f32>, Tensor<f32>) {
        (self.prev.as_ref().map(|p| gather(p, idx)), gather(&self.measurements, idx), gather(&self.target, idx))
    }
}

/// Inference-mode MSE of `generator` over `data`, in the `[-1, 1]` domain.
pub fn stage_mse(generator: &Generator<f32>, data: &StageData) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sum = 0.0;
    for chunk in idx.chunks(INFER_BATCH) {
        let (prev, y, target) = data.batch(chunk);
        let out = generator.infer(prev.as_ref(), &y)?;
        sum += out.data().iter().zip(target.data()).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum::<f64>();
    }
    Ok(sum / data.target.numel() as f64)
}

/// Adam state as named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, (NamedTensor, NamedTensor)>,
}

impl OptimizerState {
    fn capture(adam: &Adam<f32>) -> Self {
        let named = |t: &Tensor<f32>| NamedTensor { shape: t.shape().to_vec(), data: t.data().to_vec() };
        OptimizerState {
            step: adam.step_count(),
            moments: adam.moments().iter().map(|(k, m)| (k.clone(), (named(&m.first), named(&m.second)))).collect(),
        }
    }

    fn restore(&self, config: AdamConfig) -> Adam<f32> {
        let tensor = |t: &NamedTensor| Tensor::new(t.shape.clone(), t.data.clone());
        let moments = self
            .moments
            .iter()
            .map(|(k, (m, v))| (k.clone(), Moments { first: tensor(m), second: tensor(v) }))
            .collect();
        Adam::from_state(config, self.step, moments)
    }
}

/// Shuffle stream state; each epoch's order comes from a ChaCha8 generator
/// seeded by `(seed, stage, epoch)`, so the next epoch index is the whole
/// state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stage: usize,
    pub next_epoch: usize,
}

fn epoch_seed(seed: u64, stage: usize, epoch: usize) -> u64 {
    init_seed(seed, stage) ^ (epoch as u64).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Training state of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: usize,
    /// Best-epoch weights; what later stages and the reconstructor use.
    pub weights: StageWeights,
    /// Weights after the last completed epoch, for resuming.
    pub latest: StageWeights,
    pub gen_optimizer: OptimizerState,
    pub disc_optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_mse: f64,
    /// Training ended by early stopping or the epoch limit.
    pub complete: bool,
    pub history: Vec<EpochMetrics>,
    pub config: TrainConfig,
    pub rng: RngState,
    pub transfer: Option<TransferReport>,
}

/// How a stage starts.
#[derive(Clone, Debug)]
pub enum StageInit {
    Fresh,
    Weights { weights: Box<StageWeights>, transfer: Option<TransferReport> },
    Resume(Box<Checkpoint>),
}

/// Optional per-epoch callback, e.g. to persist checkpoints.
pub type EpochHook<'a> = &'a mut dyn FnMut(&Checkpoint) -> Result<()>;

/// Trains one stage on prepared data. `train` and `val` come from
/// [`EncodedDataset::stage_data`] with the frozen earlier stages.
pub fn train_stage(
    spec: &StageModelSpec,
    train: &StageData,
    val: &StageData,
    init: StageInit,
    cfg: &TrainConfig,
    mut hook: Option<EpochHook<'_>>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data(format!("stage {}: empty training set", spec.stage)));
    }
    let adam = cfg.adam();
    let (mut model, mut state) = match init {
        StageInit::Resume(ck) => {
            if &ck.weights.spec != spec {
                return Err(Error::Config(format!("checkpoint of stage {} does not match the requested spec", ck.stage)));
            }
            let model = StageModel::<f32>::from_weights(&ck.latest)?;
            (model, *ck)
        }
        init => {
            let (weights, transfer) = match init {
                StageInit::Weights { weights, transfer } => (*weights, transfer),
                _ => (StageModel::<f32>::new(spec, cfg.seed)?.export(InitProvenance::Fresh { seed: cfg.seed }), None),
            };
            let model = StageModel::<f32>::from_weights(&weights)?;
            let state = Checkpoint {
                stage: spec.stage,
                weights: weights.clone(),
                latest: weights,
                gen_optimizer: OptimizerState::default(),
                disc_optimizer: OptimizerState::default(),
                epoch: 0,
                best_epoch: 0,
                best_mse: f64::INFINITY,
                complete: false,
                history: Vec::new(),
                config: cfg.clone(),
                rng: RngState { seed: cfg.seed, stage: spec.stage, next_epoch: 1 },
                transfer,
            };
            (model, state)
        }
    };
    let mut opt_g = state.gen_optimizer.restore(adam);
    let mut opt_d = state.disc_optimizer.restore(adam);
    let provenance = state.weights.provenance.clone();

    while !state.complete && state.epoch < cfg.max_epochs {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let (train_mse, d_loss, g_adv_loss) = run_epoch(&mut model, &mut opt_g, &mut opt_d, train, cfg, epoch)?;
        let val_mse = if val.is_empty() { None } else { Some(stage_mse(&model.generator, val)?) };
        let metrics = EpochMetrics { epoch, train_mse, val_mse, d_loss, g_adv_loss, wall_seconds: started.elapsed().as_secs_f64() };
        if !metrics.selection_mse().is_finite() {
            return Err(Error::Numeric(format!("stage {}: validation MSE is not finite at epoch {epoch}", spec.stage)));
        }
        log::info!(
            "stage {} epoch {epoch}: train_mse {:.6} val_mse {} d_loss {:.4} g_adv {:.4} ({:.1}s)",
            spec.stage,
            train_mse,
            val_mse.map_or("-".into(), |v| format!("{v:.6}")),
            d_loss,
            g_adv_loss,
            metrics.wall_seconds
        );
        let latest = model.export(provenance.clone());
        if metrics.selection_mse() < state.best_mse {
            state.best_mse = metrics.selection_mse();
            state.best_epoch = epoch;
            state.weights = latest.clone();
        }
        state.latest = latest;
        state.history.push(metrics);
        state.epoch = epoch;
        state.rng.next_epoch = epoch + 1;
        state.gen_optimizer = OptimizerState::capture(&opt_g);
        state.disc_optimizer = OptimizerState::capture(&opt_d);
        state.complete = epoch >= cfg.max_epochs || epoch - state.best_epoch >= cfg.early_stop_patience;
        if let Some(hook) = hook.as_mut() {
            hook(&state)?;
        }
    }
    state.complete = true;
    Ok(state)
}

fn check_finite(value: f64, what: &str, spec: &StageModelSpec, epoch: usize, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("stage {}: {what} is {value} at epoch {epoch}, batch {batch}", spec.stage)))
    }
}

/// One pass over `data`; returns mean training MSE, discriminator loss and
/// generator adversarial loss.
fn run_epoch(
    model: &mut StageModel<f32>,
    opt_g: &mut Adam<f32>,
    opt_d: &mut Adam<f32>,
    data: &StageData,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, f64, f64)> {
    let spec = model.spec().clone();
    let weights = cfg.loss;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, spec.stage, epoch)));
    // A trailing batch of one would give degenerate batch statistics.
    let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).filter(|b| b.len() > 1 || data.len() == 1).collect();
    let (mut mse_sum, mut d_sum, mut adv_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
    for (b, idx) in batches.iter().enumerate() {
        let (prev, y, target) = data.batch(idx);
        let n = idx.len();
        let cond = spec.condition_discriminator.then_some(&y);
        let fake = model.generator.forward(prev.as_ref(), &y)?;

        model.zero_grad();
        // The two halves of the loss are separable, so each pass runs its
        // own backward before the next forward overwrites the caches.
        let p_real = model.discriminator.forward(&target, cond)?;
        let (g_real, _) = losses::discriminator_grads(p_real.data(), &[]);
        model.discriminator.backward(&Tensor::new(p_real.shape().to_vec(), g_real));
        let p_fake = model.discriminator.forward(&fake, cond)?;
        let (_, g_fake) = losses::discriminator_grads(&[], p_fake.data());
        model.discriminator.backward(&Tensor::new(p_fake.shape().to_vec(), g_fake));
        let d_loss = check_finite(losses::discriminator_loss(p_real.data(), p_fake.data())?, "discriminator loss", &spec, epoch, b)?;
        opt_d.step_with(|f| model.discriminator.visit_params_mut("disc", f));

        model.zero_grad();
        let mut grad = Tensor::new(
            fake.shape().to_vec(),
            losses::euclidean_grad(fake.data(), target.data(), n, cfg.euclidean_form)?,
        );
        if weights.lambda_euc != 1.0 {
            let scale = weights.lambda_euc as f32;
            grad = grad.map(|g| g * scale);
        }
        let mut adv = 0.0;
        if weights.lambda_adv > 0.0 {
            let p = model.discriminator.forward(&fake, cond)?;
            adv = check_finite(losses::generator_adv_loss(p.data())?, "generator adversarial loss", &spec, epoch, b)?;
            let scale = weights.lambda_adv as f32;
            let gp: Vec<f32> = losses::generator_adv_grad(p.data()).into_iter().map(|g| g * scale).collect();
            grad.add_assign(&model.discriminator.backward(&Tensor::new(p.shape().to_vec(), gp)));
        }
        model.generator.backward(&grad);
        opt_g.step_with(|f| model.generator.visit_params_mut("gen", f));

        let mse = check_finite(
            losses::euclidean_loss(fake.data(), target.data(), n, EuclideanForm::Mse)?,
            "training MSE",
            &spec,
            epoch,
            b,
        )?;
        mse_sum += mse * n as f64;
        d_sum += d_loss * n as f64;
        adv_sum += adv * n as f64;
        seen += n;
    }
    let seen = seen.max(1) as f64;
    Ok((mse_sum / seen, d_sum / seen, adv_sum / seen))
}

/// Train / validation data of a pyramid run.
#[derive(Clone, Copy)]
pub struct PyramidData<'a> {
    pub train: &'a EncodedDataset,
    pub val: &'a EncodedDataset,
}

/// Trains stages in order through `cfg.stages` (default: all). Complete
/// checkpoints in `existing` are kept as they are; an incomplete one is
/// resumed. `hook` is called after every epoch of every stage.
pub fn train_pyramid(
    data: PyramidData<'_>,
    sensing: &MultiRateSensingMatrix,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    existing: Vec<Checkpoint>,
    mut hook: Option<EpochHook<'_>>,
) -> Result<Vec<Checkpoint>> {
    let stages = cfg.stages.unwrap_or(sensing.config().stages());
    if stages == 0 || stages > sensing.config().stages() {
        return Err(Error::Config(format!("cannot train {stages} of {} stages", sensing.config().stages())));
    }
    let mut done: Vec<Checkpoint> = Vec::new();
    let mut existing = existing.into_iter();
    for stage in 1..=stages {
        let spec = model_cfg.stage_spec(sensing.config(), stage)?;
        let prior = existing.next();
        if let Some(ck) = &prior {
            if ck.stage != stage || ck.weights.spec != spec {
                return Err(Error::Config(format!("stored checkpoint for stage {} does not match the configuration", ck.stage)));
            }
            if ck.complete {
                log::info!("stage {stage}: reusing completed checkpoint (epoch {})", ck.best_epoch);
                done.push(prior.expect("checked"));
                continue;
            }
        }
        let init = match prior {
            Some(ck) => {
                log::info!("stage {stage}: resuming after epoch {}", ck.epoch);
                StageInit::Resume(Box::new(ck))
            }
            None if stage > 1 && cfg.transfer => {
                let src = &done[stage - 2].weights;
                let (weights, report) = transfer_weights(src, &spec, cfg.seed)?;
                log::info!("stage {stage}: transferred {} of {} tensors", report.copied.len(), report.copied.len() + report.fresh.len());
                StageInit::Weights { weights: Box::new(weights), transfer: Some(report) }
            }
            None => StageInit::Fresh,
        };
        let frozen_models: Vec<StageModel<f32>> =
            done.iter().map(|ck| StageModel::from_weights(&ck.weights)).collect::<Result<_>>()?;
        let frozen: Vec<&Generator<f32>> = frozen_models.iter().map(|m| &m.generator).collect();
        let train = data.train.stage_data(stage, &frozen)?;
        let val = data.val.stage_data(stage, &frozen)?;
        let ck = train_stage(&spec, &train, &val, init, cfg, hook.as_mut().map(|h| &mut **h as EpochHook<'_>))?;
        done.push(ck);
    }
    Ok(done)
}

/// Per-stage test MSE of both ablation variants.
///
/// `fused` and `no_fusion` score every stage against the full-resolution
/// test image, with the stage output pixel-replicated up to that size, so
/// stages of different resolution share one reference. The `_own_level`
/// curves score each stage against its own pyramid level instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub stages: usize,
    pub fused: Vec<f64>,
    pub no_fusion: Vec<f64>,
    pub fused_own_level: Vec<f64>,
    pub no_fusion_own_level: Vec<f64>,
}

/// Per-stage test MSE of a cascade: `(full resolution, own level)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeMse {
    pub full_resolution: Vec<f64>,
    pub own_level: Vec<f64>,
}

fn squared_error(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum()
}

/// Sum of squared differences between `small` (side `s`) replicated by
/// `factor` and `full` (side `s * factor`), one channel plane each.
fn replicated_error(small: &[f32], full: &[f32], side: usize, factor: usize) -> f64 {
    let big = side * factor;
    (0..big * big)
        .map(|i| {
            let (y, x) = (i / big, i % big);
            (f64::from(small[(y / factor) * side + x / factor]) - f64::from(full[i])).powi(2)
        })
        .sum()
}

/// Inference-mode test MSE of each stage of a cascade.
pub fn cascade_mse(checkpoints: &[Checkpoint], data: &EncodedDataset) -> Result<CascadeMse> {
    if data.is_empty() {
        return Err(Error::Data("no test samples".into()));
    }
    let models: Vec<StageModel<f32>> = checkpoints.iter().map(|ck| StageModel::from_weights(&ck.weights)).collect::<Result<_>>()?;
    let gens: Vec<&Generator<f32>> = models.iter().map(|m| &m.generator).collect();
    let outputs = run_frozen(&gens, data)?;
    let full = data.level(data.stages());
    let full_side = pyramid_side(data.stages());
    let mut result = CascadeMse { full_resolution: Vec::new(), own_level: Vec::new() };
    for (s, out) in outputs.iter().enumerate() {
        let target = data.level(s + 1);
        result.own_level.push(squared_error(out.data(), target) / target.len() as f64);
        let side = pyramid_side(s + 1);
        let plane = side * side;
        let full_plane = full_side * full_side;
        let sum: f64 = (0..out.data().len() / plane)
            .map(|p| replicated_error(&out.data()[p * plane..(p + 1) * plane], &full[p * full_plane..(p + 1) * full_plane], side, full_side / side))
            .sum();
        result.full_resolution.push(sum / full.len() as f64);
    }
    Ok(result)
}

/// Trains the standard pyramid and a variant whose stages `>= 2` never see
/// measurements, then reports per-stage test MSE of both. Stage 1 is the
/// same network in both variants and is trained once.
pub fn ablate_fusion(
    data: PyramidData<'_>,
    test: &EncodedDataset,
    sensing: &MultiRateSensingMatrix,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<AblationResult> {
    let stages = cfg.stages.unwrap_or(sensing.config().stages());
    let fused_cfg = ModelConfig { fusion: true, ..model_cfg.clone() };
    let fused = train_pyramid(PyramidData { train: data.train, val: data.val }, sensing, &fused_cfg, cfg, Vec::new(), None)?;
    let sr_cfg = ModelConfig { fusion: false, ..model_cfg.clone() };
    let sr = train_pyramid(data, sensing, &sr_cfg, cfg, vec![fused[0].clone()], None)?;
    let (a, b) = (cascade_mse(&fused, test)?, cascade_mse(&sr, test)?);
    Ok(AblationResult {
        stages,
        fused: a.full_resolution,
        no_fusion: b.full_resolution,
        fused_own_level: a.own_level,
        no_fusion_own_level: b.own_level,
    })
}

/// `metrics.csv` contents; the first line records the config hash.
pub fn metrics_csv(history: &[EpochMetrics], config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash}\nepoch,train_mse,val_mse,d_loss,g_adv_loss,wall_seconds\n");
    for m in history {
        let val = m.val_mse.map_or(String::new(), |v| v.to_string());
        writeln!(out, "{},{},{},{},{},{:.3}", m.epoch, m.train_mse, val, m.d_loss, m.g_adv_loss, m.wall_seconds).expect("string write");
    }
    out
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config_hash: String,
    stage: usize,
    spec: StageModelSpec,
    provenance: InitProvenance,
    epoch: usize,
    best_epoch: usize,
    best_mse: f64,
    complete: bool,
    gen_step: u64,
    disc_step: u64,
    config: TrainConfig,
    loss: LossWeights,
    rng: RngState,
    transfer: Option<TransferReport>,
    history: Vec<EpochMetrics>,
}

/// Writes `weights.bin`, `optimizer.bin`, `manifest.json` and `metrics.csv`
/// into `dir`.
pub fn save_checkpoint(dir: &Path, ck: &Checkpoint, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    store::save_weights(&dir.join("weights.bin"), &ck.weights, config_hash)?;
    let mut tensors = BTreeMap::new();
    for (name, t) in &ck.latest.tensors {
        tensors.insert(format!("latest/{name}"), t.clone());
    }
    for (prefix, state) in [("gen", &ck.gen_optimizer), ("disc", &ck.disc_optimizer)] {
        for (name, (m, v)) in &state.moments {
            tensors.insert(format!("{prefix}_first/{name}"), m.clone());
            tensors.insert(format!("{prefix}_second/{name}"), v.clone());
        }
    }
    let meta = serde_json::json!({ "kind": "optimizer_state", "stage": ck.stage, "config_hash": config_hash });
    store::write_tensors(&dir.join("optimizer.bin"), &meta, &tensors)?;
    let manifest = CheckpointManifest {
        config_hash: config_hash.into(),
        stage: ck.stage,
        spec: ck.weights.spec.clone(),
        provenance: ck.weights.provenance.clone(),
        epoch: ck.epoch,
        best_epoch: ck.best_epoch,
        best_mse: ck.best_mse,
        complete: ck.complete,
        gen_step: ck.gen_optimizer.step,
        disc_step: ck.disc_optimizer.step,
        config: ck.config.clone(),
        loss: ck.config.loss,
        rng: ck.rng.clone(),
        transfer: ck.transfer.clone(),
        history: ck.history.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    store::write_atomic(&dir.join("manifest.json"), text.as_bytes())?;
    store::write_atomic(&dir.join("metrics.csv"), metrics_csv(&ck.history, config_hash).as_bytes())
}

/// Reads a checkpoint written by [`save_checkpoint`]; returns it with its
/// config hash.
pub fn load_checkpoint(dir: &Path) -> Result<(Checkpoint, String)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: e.column() as u64,
        reason: e.to_string(),
    })?;
    let (weights, _) = store::load_weights(&dir.join("weights.bin"))?;
    let (_, tensors) = store::read_tensors(&dir.join("optimizer.bin"))?;
    let mut latest = BTreeMap::new();
    let mut moments: [BTreeMap<String, (Option<NamedTensor>, Option<NamedTensor>)>; 2] = Default::default();
    for (key, t) in tensors {
        let (kind, name) = key.split_once('/').ok_or_else(|| Error::Data(format!("unexpected optimizer tensor {key}")))?;
        match kind {
            "latest" => {
                latest.insert(name.to_string(), t);
            }
            "gen_first" => moments[0].entry(name.to_string()).or_default().0 = Some(t),
            "gen_second" => moments[0].entry(name.to_string()).or_default().1 = Some(t),
            "disc_first" => moments[1].entry(name.to_string()).or_default().0 = Some(t),
            "disc_second" => moments[1].entry(name.to_string()).or_default().1 = Some(t),
            _ => return Err(Error::Data(format!("unexpected optimizer tensor {key}"))),
        }
    }
    let [gen, disc] = moments.map(|map| {
        map.into_iter()
            .map(|(k, (a, b))| match (a, b) {
                (Some(a), Some(b)) => Ok((k, (a, b))),
                _ => Err(Error::Data(format!("incomplete optimizer moments for {k}"))),
            })
            .collect::<Result<BTreeMap<_, _>>>()
    });
    let mut config = m.config;
    config.loss = m.loss;
    let latest = StageWeights { spec: m.spec.clone(), provenance: m.provenance, tensors: latest };
    latest.validate()?;
    let ck = Checkpoint {
        stage: m.stage,
        weights,
        latest,
        gen_optimizer: OptimizerState { step: m.gen_step, moments: gen? },
        disc_optimizer: OptimizerState { step: m.disc_step, moments: disc? },
        epoch: m.epoch,
        best_epoch: m.best_epoch,
        best_mse: m.best_mse,
        complete: m.complete,
        history: m.history,
        config,
        rng: m.rng,
        transfer: m.transfer,
    };
    Ok((ck, m.config_hash))
}
