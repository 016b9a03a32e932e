//! Experiment configuration: one TOML file, strict keys, one global seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::GeneratorConfig;
use crate::error::{LneError, Result};
use crate::evalviz::EvalConfig;
use crate::model::Architecture;
use crate::seed::SeedStream;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed; the per-stage seeds of the other sections are derived
    /// from it by [`ExperimentConfig::resolve`] and any value given there is
    /// replaced.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub architecture: Architecture,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LneError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LneError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| LneError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fan the global seed out to the stages and check cross-section consistency.
    pub fn resolve(mut self) -> Result<Self> {
        let s = SeedStream::new(self.seed);
        self.generator.seed = s.derive("generator").seed();
        self.training.seed = s.derive("training").seed();
        self.evaluation.seed = s.derive("evaluation").seed();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.architecture.validate()?;
        self.training.validate()?;
        self.evaluation.validate()?;
        if self.architecture.input_size != self.generator.image_size {
            return Err(LneError::Config(format!(
                "architecture.input_size {} differs from generator.image_size {}",
                self.architecture.input_size, self.generator.image_size
            )));
        }
        Ok(())
    }
}
