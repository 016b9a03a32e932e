//! Artifact directories: provenance files and checkpoint metadata.

use std::fs;
use std::path::{Path, PathBuf};

use lne_core::cohort::Cohort;
use lne_core::config::ExperimentConfig;
use lne_core::model::{Architecture, Checkpoint};
use lne_core::training::{Method, TrainConfig};
use lne_core::LneError;
use serde_json::{json, Value};

use crate::Failure;

pub const VERSION: &str = env!("LNE_VERSION");
pub const CONFIG_FILE: &str = "config.toml";
pub const VERSION_FILE: &str = "VERSION";

pub fn io_error(path: &Path, source: std::io::Error) -> Failure {
    Failure::Lib(LneError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Create `dir` and write the resolved config and version string into it.
pub fn prepare(dir: &Path, cfg: &ExperimentConfig) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    write_text(&dir.join(VERSION_FILE), &format!("{VERSION}\n"))
}

pub fn checkpoint_meta(
    method: Method,
    fold: usize,
    epoch: usize,
    arch: &Architecture,
    training: &TrainConfig,
    val_loss: Option<f64>,
) -> Value {
    json!({
        "method": method.as_str(),
        "fold": fold,
        "epoch": epoch,
        "architecture": arch,
        "training": training,
        "val_loss": val_loss,
        "version": VERSION,
    })
}

/// Architecture, method label and fold recorded in a checkpoint.
pub struct CheckpointInfo {
    pub arch: Architecture,
    pub label: String,
    pub fold: Option<usize>,
    pub epoch: usize,
    pub training: Option<TrainConfig>,
}

pub fn checkpoint_info(ckpt: &Checkpoint, fallback: &Architecture) -> Result<CheckpointInfo, Failure> {
    let meta = &ckpt.meta;
    let arch = match meta.get("architecture") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Failure::Usage(format!("checkpoint architecture is unreadable: {e}")))?,
        None => fallback.clone(),
    };
    let training = match meta.get("training") {
        Some(v) => Some(
            serde_json::from_value(v.clone())
                .map_err(|e| Failure::Usage(format!("checkpoint training config is unreadable: {e}")))?,
        ),
        None => None,
    };
    Ok(CheckpointInfo {
        arch,
        label: meta.get("method").and_then(Value::as_str).unwrap_or("encoder").to_string(),
        fold: meta.get("fold").and_then(Value::as_u64).map(|f| f as usize),
        epoch: meta.get("epoch").and_then(Value::as_u64).unwrap_or(0) as usize,
        training,
    })
}

/// Reject a dataset whose images the model cannot take.
pub fn check_data(cohort: &Cohort, arch: &Architecture) -> Result<(), Failure> {
    if cohort.height != arch.input_size || cohort.width != arch.input_size {
        return Err(Failure::Usage(format!(
            "dataset images are {}x{} but the model expects {}x{}",
            cohort.height, cohort.width, arch.input_size, arch.input_size
        )));
    }
    Ok(())
}

/// Default output directory next to a checkpoint directory.
pub fn beside(checkpoint: &Path, name: &str) -> PathBuf {
    match checkpoint.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.join(name),
        _ => PathBuf::from(name),
    }
}
