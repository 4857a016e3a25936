//! Run directories: `<root>/<config hash prefix>-<unix seconds>/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lapran::config::ExperimentConfig;
use lapran::pyramid_data::{prepare_dataset, PreparedDataset};
use lapran::reconstructor::stage_dir;
use lapran::store::write_atomic;
use lapran::trainer::{load_checkpoint, Checkpoint};
use lapran::{Error, Result};

use crate::Global;

/// Loads `--config`, applies flag overrides and resolves the data path
/// relative to the config file.
pub fn load_config(global: &Global) -> Result<ExperimentConfig> {
    let path = global.config.as_ref().ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = global.seed {
        config.train.seed = seed;
    }
    if let Some(data) = config.data.as_mut() {
        if data.path.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            data.path = base.join(&data.path);
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn load_data(config: &ExperimentConfig) -> Result<PreparedDataset> {
    let data = config.data.as_ref().ok_or_else(|| Error::Config("the config has no [data] section".into()))?;
    let side = config.sensing.image_side().expect("validated");
    let prepared = prepare_dataset(data, config.sensing.channels(), side)?;
    log::info!(
        "{}: {} train / {} val / {} test patches",
        data.name,
        prepared.train.len(),
        prepared.val.len(),
        prepared.test.len()
    );
    Ok(prepared)
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Most recent run of this config under `root`, if any.
pub fn latest_run(root: &Path, config: &ExperimentConfig) -> Option<PathBuf> {
    let prefix = format!("{}-", config.short_hash());
    let mut runs: Vec<(u64, PathBuf)> = fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let stamp = name.strip_prefix(&prefix)?.parse().ok()?;
            e.path().is_dir().then(|| (stamp, e.path()))
        })
        .collect();
    runs.sort();
    runs.pop().map(|(_, p)| p)
}

/// A new, empty run directory for `config`.
pub fn new_run(root: &Path, config: &ExperimentConfig) -> Result<PathBuf> {
    let mut stamp = unix_seconds();
    loop {
        let dir = root.join(format!("{}-{stamp}", config.short_hash()));
        if !dir.exists() {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            return Ok(dir);
        }
        stamp += 1;
    }
}

/// Writes the effective config and the dataset manifests.
pub fn write_run_files(dir: &Path, config: &ExperimentConfig, data: Option<&PreparedDataset>) -> Result<()> {
    let hash = config.hash();
    let text = format!("# config_hash = \"{hash}\"\n{}", config.to_toml());
    write_atomic(&dir.join("config.toml"), text.as_bytes())?;
    if let Some(data) = data {
        for manifest in &data.manifests {
            let json = serde_json::json!({ "config_hash": hash, "dataset": manifest });
            let path = dir.join(format!("dataset_{}.json", manifest.split.name()));
            write_atomic(&path, serde_json::to_string_pretty(&json).expect("manifest serializes").as_bytes())?;
        }
    }
    Ok(())
}

/// Consecutive stage checkpoints stored in `dir`, checked against `hash`.
pub fn load_checkpoints(dir: &Path, stages: usize, hash: &str) -> Result<Vec<Checkpoint>> {
    let mut out = Vec::new();
    for stage in 1..=stages {
        let sdir = stage_dir(dir, stage);
        if !sdir.join("manifest.json").exists() {
            break;
        }
        let (ck, stored) = load_checkpoint(&sdir)?;
        if stored != hash {
            return Err(Error::Config(format!("{} was written by a different config ({stored})", sdir.display())));
        }
        out.push(ck);
    }
    Ok(out)
}
