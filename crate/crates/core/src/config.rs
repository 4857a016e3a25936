//! File-backed experiment configuration.
//!
//! ```toml
//! [sensing]   # m, beta, k, n, channels, seed
//! [model]     # per-stage widths, kernel, fusion
//! [train]     # optimizer and schedule
//! [loss]      # lambda_adv, lambda_euc
//! [data]      # dataset recipe
//! [eval]      # compression ratios, ablation seeds
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::ModelConfig;
use crate::pyramid_data::DataConfig;
use crate::sensing::SensingConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Empty means the CR of the full measurement set.
    pub compression_ratios: Vec<f64>,
    pub ablation_seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { compression_ratios: Vec::new(), ablation_seeds: vec![1, 2, 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sensing: SensingConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn new(sensing: SensingConfig) -> Self {
        ExperimentConfig {
            sensing,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            data: None,
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.train.loss = config.loss;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for stage in 1..=self.sensing.stages() {
            self.model.stage_spec(&self.sensing, stage)?;
        }
        let mut train = self.train.clone();
        train.loss = self.loss;
        train.validate()?;
        if let Some(stages) = self.train.stages {
            if stages == 0 || stages > self.sensing.stages() {
                return Err(Error::Config(format!("train.stages must lie in 1..={}, got {stages}", self.sensing.stages())));
            }
        }
        let side = self.sensing.image_side().ok_or_else(|| {
            Error::Config(format!("sensing.n = {} is not a square image size", self.sensing.signal_dim()))
        })?;
        let pyramid = crate::pyramid_data::pyramid_side(self.sensing.stages());
        if side != pyramid {
            return Err(Error::Config(format!(
                "a {}-stage pyramid needs {pyramid}x{pyramid} images, but sensing.n gives {side}x{side}",
                self.sensing.stages()
            )));
        }
        if let Some(data) = &self.data {
            if data.patch.is_some_and(|p| p != side) {
                return Err(Error::Config(format!("data.patch must equal the image side {side}")));
            }
        }
        if self.eval.compression_ratios.iter().any(|&cr| !(cr >= 1.0 && cr.is_finite())) {
            return Err(Error::Config("eval.compression_ratios must be at least 1".into()));
        }
        Ok(())
    }

    /// Ratios to evaluate at; the full-set ratio when none are configured.
    pub fn eval_ratios(&self) -> Vec<f64> {
        if self.eval.compression_ratios.is_empty() {
            vec![self.sensing.signal_dim() as f64 / self.sensing.final_dim() as f64]
        } else {
            self.eval.compression_ratios.clone()
        }
    }

    /// SHA-256 (hex) of the canonical serialization. `train.stages` only
    /// says how far to train, so it is left out.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.train.stages = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// First 16 hex digits of [`hash`](Self::hash).
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }
}
