//! Objectives, optimizer and training loop.

mod adam;
mod loss;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{LneError, Result};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use loss::{
    ae_loss, lne_loss, lssl_loss, step_forward, step_forward_with, FrozenTargets, LossParts, StepBatch, StepOutput, LSSL_TAU,
};
pub use train::{
    evaluate_pairs, init_state, pairs_to_batch, read_epoch_log, train, write_epoch_log, EpochMetrics, Split, TrainOutcome, TrainState,
};

/// Pretraining objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "LNE")]
    Lne,
    #[serde(rename = "AE")]
    Ae,
    #[serde(rename = "LSSL")]
    Lssl,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LNE" => Ok(Method::Lne),
            "AE" => Ok(Method::Ae),
            "LSSL" => Ok(Method::Lssl),
            _ => Err(LneError::Config(format!("unknown method {s:?} (expected LNE, AE or LSSL)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lne => "LNE",
            Method::Ae => "AE",
            Method::Lssl => "LSSL",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_dir: f64,
    /// Floor on vector norms inside the cosine.
    pub cos_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_recon: 2.0,
            lambda_dir: 1.0,
            cos_eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_nb: usize,
    pub lambda_recon: f64,
    pub lambda_dir: f64,
    pub cos_eps: f64,
    /// Stop gradients through the pooled direction.
    pub detach_dh: bool,
    pub augment: bool,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Lne,
            epochs: 50,
            batch_size: 64,
            n_nb: 5,
            lambda_recon: 2.0,
            lambda_dir: 1.0,
            cos_eps: 1e-8,
            detach_dh: true,
            augment: true,
            learning_rate: 5e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_recon: self.lambda_recon,
            lambda_dir: self.lambda_dir,
            cos_eps: self.cos_eps,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LneError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.n_nb == 0 {
            return bad("n_nb must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.lambda_recon < 0.0 || self.lambda_dir < 0.0 {
            return bad("weight_decay and loss weights must be non-negative");
        }
        if !(self.cos_eps > 0.0) || !(self.adam_eps > 0.0) {
            return bad("cos_eps and adam_eps must be positive");
        }
        Ok(())
    }
}
