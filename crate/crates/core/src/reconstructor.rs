//! Cascaded inference from a measurement prefix.
//!
//! A stage is enabled when its whole measurement prefix is present and the
//! available compression ratio does not exceed its threshold. The cascade
//! runs the enabled stages in order, once each, and returns every level.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lapran_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Generator, StageModel, StageWeights};
use crate::mrcs::read_mrcs;
use crate::pyramid_data::{ImagePyramid, ImageTensor};
use crate::sensing::{MeasurementSet, SensingConfig};
use crate::store;

/// Anything that turns measurements into an image pyramid.
pub trait PyramidReconstructor {
    fn reconstruct(&self, set: &MeasurementSet) -> Result<ImagePyramid>;
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    sensing: SensingConfig,
    thresholds: Vec<f64>,
    config_hash: String,
}

/// Frozen generators of stages `1..=depth` plus their enablement thresholds.
pub struct CascadeBundle {
    sensing: SensingConfig,
    thresholds: Vec<f64>,
    weights: Vec<StageWeights>,
    generators: Vec<Generator<f32>>,
    config_hash: String,
}

impl std::fmt::Debug for CascadeBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CascadeBundle")
            .field("stage_dims", &self.sensing.stage_dims())
            .field("thresholds", &self.thresholds)
            .field("depth", &self.depth())
            .finish()
    }
}

/// `N / stage_dims[i]` for every stage.
pub fn default_thresholds(sensing: &SensingConfig) -> Vec<f64> {
    sensing.stage_dims().iter().map(|&q| sensing.signal_dim() as f64 / q as f64).collect()
}

impl CascadeBundle {
    /// `weights` may cover fewer stages than the sensing config (a partly
    /// trained run); deeper stages are then never enabled.
    pub fn new(sensing: SensingConfig, weights: Vec<StageWeights>, config_hash: impl Into<String>) -> Result<Self> {
        if weights.is_empty() || weights.len() > sensing.stages() {
            return Err(Error::Config(format!("a bundle needs 1..={} stages, got {}", sensing.stages(), weights.len())));
        }
        let mut generators = Vec::with_capacity(weights.len());
        for (i, w) in weights.iter().enumerate() {
            let stage = i + 1;
            if w.spec.stage != stage
                || w.spec.channels != sensing.channels()
                || w.spec.measurement_dim != sensing.stage_dim(stage)?
            {
                return Err(Error::Config(format!("stage {stage} weights do not match the sensing configuration")));
            }
            generators.push(StageModel::<f32>::from_weights(w)?.generator);
        }
        Ok(CascadeBundle { thresholds: default_thresholds(&sensing), sensing, weights, generators, config_hash: config_hash.into() })
    }

    /// Replaces the per-stage CR upper bounds.
    pub fn with_thresholds(mut self, thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.len() != self.sensing.stages() || thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config(format!("expected {} positive thresholds, got {thresholds:?}", self.sensing.stages())));
        }
        self.thresholds = thresholds;
        Ok(self)
    }

    pub fn sensing(&self) -> &SensingConfig {
        &self.sensing
    }

    pub fn stage_dims(&self) -> &[usize] {
        self.sensing.stage_dims()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn weights(&self) -> &[StageWeights] {
        &self.weights
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Number of stages with weights.
    pub fn depth(&self) -> usize {
        self.generators.len()
    }

    /// Writes `bundle.json` and `stage<i>/weights.bin` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (i, w) in self.weights.iter().enumerate() {
            let stage_dir = stage_dir(dir, i + 1);
            fs::create_dir_all(&stage_dir).map_err(|e| Error::io(&stage_dir, e))?;
            store::save_weights(&stage_dir.join("weights.bin"), w, &self.config_hash)?;
        }
        save_bundle_manifest(dir, &self.sensing, &self.thresholds, &self.config_hash)
    }

    /// Loads `bundle.json` and every consecutive `stage<i>/weights.bin`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("bundle.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BundleManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: e.column() as u64,
            reason: e.to_string(),
        })?;
        let mut weights = Vec::new();
        for stage in 1..=manifest.sensing.stages() {
            let file = stage_dir(dir, stage).join("weights.bin");
            if !file.exists() {
                break;
            }
            weights.push(store::load_weights(&file)?.0);
        }
        if weights.is_empty() {
            return Err(Error::MissingCheckpoint { stage: 1, needed_by: 1 });
        }
        CascadeBundle::new(manifest.sensing, weights, manifest.config_hash)?.with_thresholds(manifest.thresholds)
    }

    /// Runs stages `1..=depth` on a batch of per-image stage prefixes.
    /// `prefixes[s]` is `[n, channels * stage_dims[s]]`.
    pub fn cascade(&self, prefixes: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        if prefixes.is_empty() || prefixes.len() > self.depth() {
            return Err(Error::Config(format!("cannot run {} stages of a {}-stage bundle", prefixes.len(), self.depth())));
        }
        let mut outputs: Vec<Tensor<f32>> = Vec::with_capacity(prefixes.len());
        for (generator, y) in self.generators.iter().zip(prefixes) {
            let out = generator.infer(outputs.last(), y)?;
            outputs.push(out);
        }
        Ok(outputs)
    }
}

pub fn stage_dir(run_dir: &Path, stage: usize) -> PathBuf {
    run_dir.join(format!("stage{stage}"))
}

/// Writes the `bundle.json` that lets [`CascadeBundle::load`] read a run
/// directory whose stages were saved as checkpoints.
pub fn save_bundle_manifest(dir: &Path, sensing: &SensingConfig, thresholds: &[f64], config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = BundleManifest { sensing: sensing.clone(), thresholds: thresholds.to_vec(), config_hash: config_hash.into() };
    let text = serde_json::to_string_pretty(&manifest).expect("bundle manifest serializes");
    store::write_atomic(&dir.join("bundle.json"), text.as_bytes())
}

/// Deepest stage enabled by `available_len` measurements per channel.
pub fn select_stages(available_len: usize, bundle: &CascadeBundle) -> Result<usize> {
    let dims = bundle.stage_dims();
    if available_len < dims[0] {
        return Err(Error::InsufficientMeasurements { available: available_len, required: dims[0] });
    }
    let cr = bundle.sensing.signal_dim() as f64 / available_len as f64;
    let enabled = dims
        .iter()
        .zip(bundle.thresholds())
        .take_while(|&(&q, &threshold)| q <= available_len && cr <= threshold)
        .count();
    if enabled == 0 {
        return Err(Error::InsufficientMeasurements { available: available_len, required: dims[0] });
    }
    Ok(enabled.min(bundle.depth()))
}

fn check_set(set: &MeasurementSet, bundle: &CascadeBundle) -> Result<()> {
    let s = &bundle.sensing;
    let side = s.image_side().unwrap_or(0);
    if set.stage_dims() != s.stage_dims() || set.source_shape() != (s.channels(), side, side) {
        return Err(Error::Shape(format!(
            "measurements for dims {:?} and shape {:?} do not fit a bundle with dims {:?} and {} channels",
            set.stage_dims(),
            set.source_shape(),
            s.stage_dims(),
            s.channels()
        )));
    }
    Ok(())
}

/// Reconstructs levels `1..=select_stages(...)` of one image.
pub fn reconstruct(set: &MeasurementSet, bundle: &CascadeBundle) -> Result<ImagePyramid> {
    check_set(set, bundle)?;
    let depth = select_stages(set.available(), bundle)?;
    let prefixes = (1..=depth)
        .map(|stage| {
            let y = set.slice(stage)?;
            Ok(Tensor::new(vec![1, y.len()], y))
        })
        .collect::<Result<Vec<_>>>()?;
    let levels = bundle
        .cascade(&prefixes)?
        .into_iter()
        .map(|t| {
            let (c, side) = (t.shape()[1], t.shape()[2]);
            ImageTensor::new(c, side, t.into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    ImagePyramid::from_levels(levels)
}

impl PyramidReconstructor for CascadeBundle {
    fn reconstruct(&self, set: &MeasurementSet) -> Result<ImagePyramid> {
        reconstruct(set, self)
    }
}

/// One `reconstruct` call in the timing report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub source: String,
    pub available: usize,
    pub compression_ratio: f64,
    pub stages: usize,
    pub milliseconds: f64,
}

pub const TIMING_HEADER: &str = "source,available,compression_ratio,stages,milliseconds";

impl TimingRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{:.4}", self.source, self.available, self.compression_ratio, self.stages, self.milliseconds)
    }
}

/// Times one reconstruction.
pub fn timed_reconstruct(set: &MeasurementSet, bundle: &CascadeBundle, source: &str) -> Result<(ImagePyramid, TimingRow)> {
    let started = Instant::now();
    let pyramid = reconstruct(set, bundle)?;
    let milliseconds = started.elapsed().as_secs_f64() * 1e3;
    let row = TimingRow {
        source: source.to_string(),
        available: set.available(),
        compression_ratio: bundle.sensing.signal_dim() as f64 / set.available() as f64,
        stages: pyramid.depth(),
        milliseconds,
    };
    Ok((pyramid, row))
}

/// Result of [`reconstruct_file`].
#[derive(Clone, Debug)]
pub struct FileReconstruction {
    pub pyramid: ImagePyramid,
    pub timing: TimingRow,
    pub images: Vec<PathBuf>,
}

/// Reads an MRCS file, reconstructs it, writes `level<i>.png` for every
/// level into `out_dir` and appends a row to `out_dir/timing.csv`.
pub fn reconstruct_file(path: &Path, bundle: &CascadeBundle, out_dir: &Path) -> Result<FileReconstruction> {
    let (config, set) = read_mrcs(path)?;
    if config != bundle.sensing {
        return Err(Error::Config(format!(
            "{} was encoded with a different sensing configuration than the bundle",
            path.display()
        )));
    }
    let (pyramid, timing) = timed_reconstruct(&set, bundle, &path.display().to_string())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut images = Vec::new();
    for (i, level) in pyramid.levels().iter().enumerate() {
        let file = out_dir.join(format!("level{}.png", i + 1));
        level.save_png(&file)?;
        images.push(file);
    }
    append_timing(&out_dir.join("timing.csv"), &timing, bundle.config_hash())?;
    Ok(FileReconstruction { pyramid, timing, images })
}

/// Appends one row, writing the header first if the file is new.
pub fn append_timing(path: &Path, row: &TimingRow, config_hash: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(&format!("# config_hash={config_hash}\n{TIMING_HEADER}\n"));
    }
    text.push_str(&row.csv_line());
    text.push('\n');
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
