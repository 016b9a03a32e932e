use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{LneError, Result};
use crate::model::{apply_bn_updates, head_forward, head_forward_on, init_head, Architecture, FeatureMode, HeadConfig, Mode, ModelParams};
use crate::seed::SeedStream;
use crate::training::{adam_step, AdamConfig, OptimizerState};

use super::features::{extract_features, features_on, Sample, Standardizer, Task};
use super::metrics::{bacc, class_weights, r2, rmse};

/// Optimizer schedule for a downstream head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl HeadTraining {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Features with their regression targets and class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Tensor<f32>,
    pub targets: Vec<f64>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn from_samples(params: &ModelParams<f32>, arch: &Architecture, samples: &[Sample], mode: FeatureMode) -> Result<Self> {
        Ok(FeatureSet {
            features: extract_features(params, arch, samples, mode)?,
            targets: samples.iter().map(|s| s.target).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> Result<FeatureSet> {
        let d = self.features.numel() / self.len();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
        }
        Ok(FeatureSet {
            features: Tensor::new(vec![idx.len(), d], data)?,
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// Downstream metrics; those not applicable to the task are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub r2: f64,
    pub rmse: f64,
    pub bacc: f64,
    pub n: usize,
}

/// A trained head together with the input/target normalization it expects.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedHead {
    pub task: Task,
    pub cfg: HeadConfig,
    pub params: ModelParams<f32>,
    pub standardizer: Standardizer,
    pub target_mean: f64,
    pub target_sd: f64,
    pub n_classes: usize,
    pub class_weights: Vec<f64>,
    pub best_epoch: usize,
}

enum Outputs {
    Values(Vec<f64>),
    Labels(Vec<usize>),
}

impl FittedHead {
    fn decode(&self, out: &Tensor<f32>) -> Outputs {
        if self.task.is_regression() {
            Outputs::Values(out.data().iter().map(|&v| v as f64 * self.target_sd + self.target_mean).collect())
        } else {
            let c = self.n_classes;
            Outputs::Labels(
                out.data()
                    .chunks(c)
                    .map(|row| {
                        let mut best = 0;
                        for k in 1..c {
                            if row[k] > row[best] {
                                best = k;
                            }
                        }
                        best
                    })
                    .collect(),
            )
        }
    }

    pub fn predict_raw(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        head_forward(&self.params, &self.cfg, &self.standardizer.apply(features)?)
    }

    pub fn evaluate(&self, set: &FeatureSet) -> Result<EvalMetrics> {
        metrics_for(self, &self.predict_raw(&set.features)?, set)
    }

    fn loss_on(&self, tape: &mut Tape<f32>, out: Var, targets: &[f64], labels: &[usize]) -> Result<Var> {
        if self.task.is_regression() {
            let t: Vec<f32> = targets
                .iter()
                .map(|y| ((y - self.target_mean) / self.target_sd) as f32)
                .collect();
            let t = tape.constant(Tensor::new(vec![t.len(), 1], t)?)?;
            tape.mse(out, t)
        } else {
            let w: Vec<f32> = self.class_weights.iter().map(|&w| w as f32).collect();
            tape.softmax_cross_entropy(out, labels, &w)
        }
    }
}

fn metrics_for(head: &FittedHead, out: &Tensor<f32>, set: &FeatureSet) -> Result<EvalMetrics> {
    let n = set.len();
    Ok(match head.decode(out) {
        Outputs::Values(pred) => EvalMetrics {
            r2: r2(&pred, &set.targets)?,
            rmse: rmse(&pred, &set.targets)?,
            bacc: f64::NAN,
            n,
        },
        Outputs::Labels(pred) => EvalMetrics {
            r2: f64::NAN,
            rmse: f64::NAN,
            bacc: bacc(&pred, &set.labels, head.n_classes)?,
            n,
        },
    })
}

/// Validation score, larger is better: −MSE for regression, BACC for
/// classification (−loss when a class is missing from validation).
fn score(head: &FittedHead, out: &Tensor<f32>, set: &FeatureSet) -> Result<f64> {
    match head.decode(out) {
        Outputs::Values(pred) => Ok(-pred.iter().zip(&set.targets).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / set.len() as f64),
        Outputs::Labels(pred) => match bacc(&pred, &set.labels, head.n_classes) {
            Ok(b) => Ok(b),
            Err(_) => {
                let mut tape = Tape::new();
                let o = tape.constant(out.clone())?;
                let l = head.loss_on(&mut tape, o, &set.targets, &set.labels)?;
                Ok(-(tape.value(l).item() as f64) - 1.0)
            }
        },
    }
}

fn better(a: f64, b: f64) -> bool {
    a.partial_cmp(&b) == Some(Ordering::Greater)
}

fn batches(n: usize, batch_size: usize, stream: SeedStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream.rng());
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn named_grads(tape: &mut Tape<f32>, loss: Var, bound: &crate::model::Bound) -> Result<BTreeMap<String, Tensor<f32>>> {
    let grads = tape.backward(loss)?;
    let mut named = BTreeMap::new();
    for (name, &var) in bound.iter() {
        if tape.requires_grad(var) {
            named.insert(name.clone(), grads.tensor(var)?);
        }
    }
    Ok(named)
}

/// Train a head on fixed features; the epoch with the best validation
/// score is kept.
pub fn fit_head_frozen(
    train: &FeatureSet,
    val: &FeatureSet,
    task: Task,
    n_classes: usize,
    cfg: &HeadConfig,
    opts: &HeadTraining,
) -> Result<FittedHead> {
    if train.len() < 2 || val.is_empty() {
        return Err(LneError::Invalid("head training needs ≥ 2 training and ≥ 1 validation samples".into()));
    }
    let expected_out = if task.is_regression() { 1 } else { n_classes };
    if cfg.output_dim != expected_out {
        return Err(LneError::Config(format!(
            "head output dim {} does not fit the {} task",
            cfg.output_dim,
            task.as_str()
        )));
    }
    let (target_mean, target_sd, weights) = if task.is_regression() {
        let (m, s) = super::metrics::mean_sd(&train.targets);
        if !(s > 0.0) {
            return Err(LneError::Degenerate("constant regression targets".into()));
        }
        (m, s, Vec::new())
    } else {
        (0.0, 1.0, class_weights(&train.labels, n_classes)?)
    };
    let input_dim = train.features.numel() / train.len();
    let stream = SeedStream::new(opts.seed);
    let mut head = FittedHead {
        task,
        cfg: cfg.clone(),
        params: init_head(cfg, input_dim, stream.derive("head-init").seed())?,
        standardizer: Standardizer::fit(&train.features)?,
        target_mean,
        target_sd,
        n_classes,
        class_weights: weights,
        best_epoch: 0,
    };
    let x_train = head.standardizer.apply(&train.features)?;
    let x_train = FeatureSet {
        features: x_train,
        ..train.clone()
    };
    let mut state = OptimizerState::default();
    let adam = opts.adam();
    let mut best = (f64::NEG_INFINITY, head.params.clone(), 0);
    for epoch in 1..=opts.epochs {
        for idx in batches(train.len(), opts.batch_size, stream.derive("head-shuffle").index(epoch as u64)) {
            let b = x_train.rows(&idx)?;
            let mut tape = Tape::new();
            let bound = head.params.bind(&mut tape, |_| true)?;
            let x = tape.constant(b.features)?;
            let out = head_forward_on(&mut tape, &bound, cfg, x)?;
            let loss = head.loss_on(&mut tape, out, &b.targets, &b.labels)?;
            let g = named_grads(&mut tape, loss, &bound)?;
            adam_step(&mut head.params, &g, &mut state, &adam)?;
        }
        let s = score(&head, &head.predict_raw(&val.features)?, val)?;
        if better(s, best.0) {
            best = (s, head.params.clone(), epoch);
        }
    }
    head.params = best.1;
    head.best_epoch = best.2;
    Ok(head)
}

/// Encoder and head after fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct FineTuned {
    pub encoder: ModelParams<f32>,
    pub head: FittedHead,
}

impl FineTuned {
    pub fn evaluate(&self, arch: &Architecture, samples: &[Sample], mode: FeatureMode) -> Result<EvalMetrics> {
        self.head.evaluate(&FeatureSet::from_samples(&self.encoder, arch, samples, mode)?)
    }
}

/// Train encoder and head jointly, starting from `encoder` and the frozen
/// head `start` (whose normalization is kept fixed). The starting point
/// itself competes in the validation selection as epoch 0.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    encoder: &ModelParams<f32>,
    arch: &Architecture,
    mode: FeatureMode,
    start: &FittedHead,
    train: &[Sample],
    val: &[Sample],
    opts: &HeadTraining,
) -> Result<FineTuned> {
    if train.len() < 2 || val.is_empty() {
        return Err(LneError::Invalid("fine-tuning needs ≥ 2 training and ≥ 1 validation samples".into()));
    }
    let mut params = encoder.filter_prefix("enc");
    params.extend(start.params.clone());
    let mut head = start.clone();
    let stream = SeedStream::new(opts.seed);
    let adam = opts.adam();
    let mut state = OptimizerState::default();
    let val_score = |params: &ModelParams<f32>, head: &FittedHead| -> Result<f64> {
        let set = FeatureSet::from_samples(params, arch, val, mode)?;
        score(head, &head.predict_raw(&set.features)?, &set)
    };
    let mut best = (val_score(&params, &head)?, params.clone(), 0);
    for epoch in 1..=opts.epochs {
        for idx in batches(train.len(), opts.batch_size, stream.derive("finetune-shuffle").index(epoch as u64)) {
            let batch: Vec<Sample> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| true)?;
            let mut updates = Vec::new();
            let f = features_on(&mut tape, &params, &bound, arch, &batch, mode, Mode::Train, &mut updates)?;
            let f = head.standardizer.apply_on(&mut tape, f)?;
            let out = head_forward_on(&mut tape, &bound, &head.cfg, f)?;
            let targets: Vec<f64> = batch.iter().map(|s| s.target).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let loss = head.loss_on(&mut tape, out, &targets, &labels)?;
            let g = named_grads(&mut tape, loss, &bound)?;
            adam_step(&mut params, &g, &mut state, &adam)?;
            apply_bn_updates(&mut params, &updates)?;
        }
        let s = val_score(&params, &head)?;
        if better(s, best.0) {
            best = (s, params.clone(), epoch);
        }
    }
    let params = best.1;
    head.params = params.filter_prefix("head.");
    head.best_epoch = best.2;
    Ok(FineTuned {
        encoder: params.filter_prefix("enc"),
        head,
    })
}
