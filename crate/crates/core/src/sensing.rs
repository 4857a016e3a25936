//! Multi-rate random encoder and measurement budgets.
//!
//! A single Gaussian matrix with `stage_dims[k-1]` rows is generated from a
//! seed. The sensing operator of stage `i` is its first `stage_dims[i-1]`
//! rows, so lower-stage measurements are always prefixes of higher ones.

use std::fmt;
use std::str::FromStr;

use num_integer::Integer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid_data::ImageTensor;

/// Constant in the RIP measurement bound `m >= C k ln(n / k)`.
pub const RIP_CONSTANT: f64 = 0.28;

/// Largest supported number of stages; keeps `beta^(k-1)` exact in `u128`.
pub const MAX_STAGES: usize = 16;

/// Measurement increment ratio, kept as an exact reduced fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Beta {
    num: u32,
    den: u32,
}

impl Beta {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 {
            return Err(Error::Config("beta denominator must be nonzero".into()));
        }
        let g = num.gcd(&den).max(1);
        Ok(Beta { num: num / g, den: den / g })
    }

    pub fn integer(value: u32) -> Self {
        Beta { num: value, den: 1 }
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `1 < beta <= 4`.
    pub fn validate(self) -> Result<()> {
        let upper = beta_upper_bound();
        if self.num <= self.den {
            return Err(Error::Config(format!("beta must exceed 1, got {self}")));
        }
        if u64::from(self.num) * u64::from(upper.den) > u64::from(upper.num) * u64::from(self.den) {
            return Err(Error::Config(format!("beta {self} exceeds the upper bound {upper}")));
        }
        Ok(())
    }

    fn from_decimal(value: f64) -> Result<Self> {
        if !value.is_finite() || value <= 0.0 {
            return Err(Error::Config(format!("beta must be a positive number, got {value}")));
        }
        let mut den = 1u32;
        while den <= 1_000_000 {
            let scaled = value * den as f64;
            if (scaled - scaled.round()).abs() < 1e-9 && scaled.round() <= u32::MAX as f64 {
                return Beta::new(scaled.round() as u32, den);
            }
            den *= 10;
        }
        Err(Error::Config(format!("beta {value} is not a short decimal; write it as a fraction")))
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Beta {
    type Err = Error;

    /// Accepts `"2"`, `"3/2"` or `"1.5"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("cannot parse beta from {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let num = n.trim().parse().map_err(|_| bad())?;
            let den = d.trim().parse().map_err(|_| bad())?;
            return Beta::new(num, den);
        }
        if let Ok(v) = s.parse::<u32>() {
            return Ok(Beta::integer(v));
        }
        Beta::from_decimal(s.parse().map_err(|_| bad())?)
    }
}

impl Serialize for Beta {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct Visitor;

        impl serde::de::Visitor<'_> for Visitor {
            type Value = Beta;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or a fraction string such as \"3/2\"")
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Beta, E> {
                u32::try_from(v).map(Beta::integer).map_err(E::custom)
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Beta, E> {
                u32::try_from(v).map(Beta::integer).map_err(E::custom)
            }

            fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<Beta, E> {
                Beta::from_decimal(v).map_err(E::custom)
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Beta, E> {
                v.parse().map_err(E::custom)
            }
        }

        deserializer.deserialize_any(Visitor)
    }
}

/// `[floor(beta^(i-1) * m) for i in 1..=k]`, computed exactly.
///
/// When `signal_dim` is given the final dimension may not exceed it.
pub fn derive_stage_dims(m: usize, beta: Beta, k: usize, signal_dim: Option<usize>) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::Config("base measurement count m must be positive".into()));
    }
    if k == 0 || k > MAX_STAGES {
        return Err(Error::Config(format!("stage count must be in 1..={MAX_STAGES}, got {k}")));
    }
    beta.validate()?;
    let mut dims = Vec::with_capacity(k);
    for i in 0..k as u32 {
        let num = u128::from(beta.num).pow(i) * m as u128;
        let dim = usize::try_from(num / u128::from(beta.den).pow(i))
            .map_err(|_| Error::Config("stage dimension overflows".into()))?;
        if dims.last().is_some_and(|&prev| dim <= prev) {
            return Err(Error::Config(format!(
                "stage dims not strictly increasing at stage {} (m = {m}, beta = {beta})",
                i + 1
            )));
        }
        dims.push(dim);
    }
    if let Some(n) = signal_dim {
        let last = dims[k - 1];
        if last > n {
            return Err(Error::Config(format!("final stage needs {last} measurements but the signal has only {n} pixels")));
        }
    }
    Ok(dims)
}

/// Upper bound on `beta` when every stage keeps the same sparsity ratio.
///
/// Going from an `N x N` level with `k` nonzeros to a `2N x 2N` level with
/// `4k` nonzeros leaves the log argument of the RIP budget unchanged, so the
/// budget ratio equals the growth of the sparsity, `2 x 2`.
pub fn beta_upper_bound() -> Beta {
    Beta::integer(2 * 2)
}

/// `ceil(0.28 * k * ln(n / k))` using the natural logarithm.
pub fn rip_lower_bound(sparsity: usize, ambient_dim: usize) -> Result<usize> {
    if sparsity == 0 || sparsity >= ambient_dim {
        return Err(Error::Config(format!(
            "RIP bound needs 0 < sparsity < ambient dimension, got {sparsity} and {ambient_dim}"
        )));
    }
    let k = sparsity as f64;
    Ok((RIP_CONSTANT * k * (ambient_dim as f64 / k).ln()).ceil() as usize)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSensingConfig", into = "RawSensingConfig")]
pub struct SensingConfig {
    base_dim: usize,
    beta: Beta,
    stages: usize,
    signal_dim: usize,
    channels: usize,
    seed: u64,
    stage_dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSensingConfig {
    m: usize,
    beta: Beta,
    k: usize,
    n: usize,
    channels: usize,
    seed: u64,
}

impl TryFrom<RawSensingConfig> for SensingConfig {
    type Error = Error;

    fn try_from(raw: RawSensingConfig) -> Result<Self> {
        SensingConfig::new(raw.m, raw.beta, raw.k, raw.n, raw.channels, raw.seed)
    }
}

impl From<SensingConfig> for RawSensingConfig {
    fn from(c: SensingConfig) -> Self {
        RawSensingConfig { m: c.base_dim, beta: c.beta, k: c.stages, n: c.signal_dim, channels: c.channels, seed: c.seed }
    }
}

impl SensingConfig {
    pub fn new(m: usize, beta: Beta, k: usize, signal_dim: usize, channels: usize, seed: u64) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {channels}")));
        }
        let stage_dims = derive_stage_dims(m, beta, k, Some(signal_dim))?;
        Ok(SensingConfig { base_dim: m, beta, stages: k, signal_dim, channels, seed, stage_dims })
    }

    /// Chooses `m = floor(N / (cr * beta^(k-1)))` so the final stage runs at
    /// compression ratio `cr` (or just below it, after rounding).
    pub fn for_compression_ratio(cr: f64, beta: Beta, k: usize, signal_dim: usize, channels: usize, seed: u64) -> Result<Self> {
        if !(cr >= 1.0) {
            return Err(Error::Config(format!("compression ratio must be at least 1, got {cr}")));
        }
        let growth = beta.as_f64().powi(k as i32 - 1);
        let m = (signal_dim as f64 / (cr * growth)).floor() as usize;
        SensingConfig::new(m, beta, k, signal_dim, channels, seed)
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn beta(&self) -> Beta {
        self.beta
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn signal_dim(&self) -> usize {
        self.signal_dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SensingConfig { seed, ..self.clone() }
    }

    pub fn stage_dims(&self) -> &[usize] {
        &self.stage_dims
    }

    /// Measurements per channel consumed by stage `stage` (1-based).
    pub fn stage_dim(&self, stage: usize) -> Result<usize> {
        self.check_stage(stage)?;
        Ok(self.stage_dims[stage - 1])
    }

    pub fn final_dim(&self) -> usize {
        self.stage_dims[self.stages - 1]
    }

    /// `N / stage_dims[i-1]`.
    pub fn compression_ratio(&self, stage: usize) -> Result<f64> {
        Ok(self.signal_dim as f64 / self.stage_dim(stage)? as f64)
    }

    /// Image side when `N` is a perfect square.
    pub fn image_side(&self) -> Option<usize> {
        let side = (self.signal_dim as f64).sqrt().round() as usize;
        (side * side == self.signal_dim).then_some(side)
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.stages {
            return Err(Error::Config(format!("stage {stage} out of range 1..={}", self.stages)));
        }
        Ok(())
    }
}

/// Seeded Gaussian matrix whose row prefixes are the per-stage operators.
#[derive(Clone, Debug)]
pub struct MultiRateSensingMatrix {
    config: SensingConfig,
    full: Vec<f64>,
}

/// Entries are i.i.d. `N(0, 1 / stage_dims[k-1])`, drawn row by row from a
/// ChaCha8 stream seeded with `config.seed`.
pub fn build_matrices(config: &SensingConfig) -> MultiRateSensingMatrix {
    let rows = config.final_dim();
    let cols = config.signal_dim;
    let scale = 1.0 / (rows as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let full = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    MultiRateSensingMatrix { config: config.clone(), full }
}

impl MultiRateSensingMatrix {
    pub fn config(&self) -> &SensingConfig {
        &self.config
    }

    pub fn stage_dims(&self) -> &[usize] {
        self.config.stage_dims()
    }

    pub fn rows(&self) -> usize {
        self.config.final_dim()
    }

    pub fn cols(&self) -> usize {
        self.config.signal_dim
    }

    /// Row-major `stage_dims[k-1] x N` entries.
    pub fn full_matrix(&self) -> &[f64] {
        &self.full
    }

    /// Row-major entries of the stage-`stage` operator (a prefix of the
    /// full matrix).
    pub fn stage_matrix(&self, stage: usize) -> Result<&[f64]> {
        let rows = self.config.stage_dim(stage)?;
        Ok(&self.full[..rows * self.cols()])
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<MeasurementSet> {
        Ok(self.encode_batch(std::slice::from_ref(image))?.pop().expect("one image in, one set out"))
    }

    /// Encodes every channel of every image against the full matrix.
    pub fn encode_batch(&self, images: &[ImageTensor]) -> Result<Vec<MeasurementSet>> {
        let n = self.cols();
        let c = self.config.channels;
        let side = self
            .config
            .image_side()
            .ok_or_else(|| Error::Shape(format!("signal dimension {n} is not a square image")))?;
        for image in images {
            if image.channels() != c || image.side() != side {
                return Err(Error::Shape(format!(
                    "image is {}x{}x{}, sensing expects {c}x{side}x{side}",
                    image.channels(),
                    image.side(),
                    image.side()
                )));
            }
        }
        let rows = self.rows();
        let signals: Vec<f64> = images.iter().flat_map(|im| im.data().iter().map(|&v| f64::from(v))).collect();
        let count = images.len() * c;
        let mut out = vec![0.0f64; count * rows];
        f64_gemm(count, n, rows, &signals, &self.full, &mut out);
        Ok(out
            .chunks(c * rows)
            .map(|item| MeasurementSet {
                stage_dims: self.config.stage_dims().to_vec(),
                source_shape: (c, side, side),
                channels: item.chunks(rows).map(|ch| ch.iter().map(|&v| v as f32).collect()).collect(),
            })
            .collect())
    }
}

/// `out[count x rows] = a[count x n] * b[rows x n]^T`.
fn f64_gemm(count: usize, n: usize, rows: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    use lapran_nn::Scalar;
    f64::gemm(count, n, rows, 1.0, a, false, b, true, 0.0, out);
}

/// Nested measurements of one image: per channel, the final-stage vector
/// (possibly truncated); each stage reads a prefix of it.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    stage_dims: Vec<usize>,
    source_shape: (usize, usize, usize),
    channels: Vec<Vec<f32>>,
}

impl MeasurementSet {
    /// Wraps per-channel vectors of equal length (at most the final stage
    /// dimension).
    pub fn from_channels(stage_dims: Vec<usize>, source_shape: (usize, usize, usize), channels: Vec<Vec<f32>>) -> Result<Self> {
        let last = *stage_dims.last().ok_or_else(|| Error::Shape("no stages".into()))?;
        if channels.len() != source_shape.0 {
            return Err(Error::Shape(format!("{} measurement channels for a {}-channel image", channels.len(), source_shape.0)));
        }
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) || len > last {
            return Err(Error::Shape(format!("channel measurement lengths must match and not exceed {last}")));
        }
        Ok(MeasurementSet { stage_dims, source_shape, channels })
    }

    pub fn stage_dims(&self) -> &[usize] {
        &self.stage_dims
    }

    pub fn source_shape(&self) -> (usize, usize, usize) {
        self.source_shape
    }

    /// Measurements present per channel.
    pub fn available(&self) -> usize {
        self.channels[0].len()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c]
    }

    /// Keeps only the first `len` measurements of every channel.
    pub fn truncated(&self, len: usize) -> MeasurementSet {
        let len = len.min(self.available());
        MeasurementSet {
            stage_dims: self.stage_dims.clone(),
            source_shape: self.source_shape,
            channels: self.channels.iter().map(|c| c[..len].to_vec()).collect(),
        }
    }

    /// Stage-`stage` measurements, channel prefixes concatenated in channel
    /// order.
    pub fn slice(&self, stage: usize) -> Result<Vec<f32>> {
        if stage == 0 || stage > self.stage_dims.len() {
            return Err(Error::Config(format!("stage {stage} out of range 1..={}", self.stage_dims.len())));
        }
        let q = self.stage_dims[stage - 1];
        if q > self.available() {
            return Err(Error::InsufficientMeasurements { available: self.available(), required: q });
        }
        Ok(self.channels.iter().flat_map(|c| c[..q].iter().copied()).collect())
    }

    /// All stage vectors that the available measurements cover.
    pub fn vectors(&self) -> Vec<Vec<f32>> {
        (1..=self.stage_dims.len()).map_while(|i| self.slice(i).ok()).collect()
    }
}

/// Free-function form of [`MeasurementSet::slice`].
pub fn slice_measurements(full: &MeasurementSet, stage: usize) -> Result<Vec<f32>> {
    full.slice(stage)
}
