use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor};
use crate::cohort::{augment_pair, ImagePair};
use crate::error::{LneError, Result};
use crate::model::{apply_bn_updates, init_params, Architecture, Mode, ModelParams};
use crate::seed::SeedStream;

use super::{adam_step, step_forward, Method, OptimizerState, StepBatch, TrainConfig, LSSL_TAU};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Pair-weighted averages over one pass. `cos_dh` is NaN when no batch had
/// at least two pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub total_loss: f64,
    pub recon_loss: f64,
    pub cos_dh: f64,
    pub n_pairs: usize,
    pub seconds: f64,
}

/// Parameters, optimizer moments and the number of completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState,
    pub epoch: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Parameters with the lowest validation loss, with their epoch.
    pub best: Option<(usize, ModelParams<f32>)>,
    pub log: Vec<EpochMetrics>,
}

/// Fresh parameters for `cfg.method`; LSSL adds its direction vector.
pub fn init_state(arch: &Architecture, cfg: &TrainConfig) -> Result<TrainState> {
    let stream = SeedStream::new(cfg.seed);
    let mut params = init_params::<f32>(arch, stream.derive("model").seed())?;
    if cfg.method == Method::Lssl {
        let d = arch.latent_dim();
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let mut rng = stream.derive(LSSL_TAU).rng();
        params.insert(LSSL_TAU, Tensor::from_fn(vec![d], |_| normal.sample(&mut rng) as f32));
    }
    Ok(TrainState {
        params,
        optimizer: OptimizerState::default(),
        epoch: 0,
    })
}

/// Stack pairs into `[N,1,S,S]` tensors.
pub fn pairs_to_batch<'a>(pairs: impl IntoIterator<Item = &'a ImagePair>, size: usize) -> Result<StepBatch<f32>> {
    let (mut xt, mut xs, mut dt) = (Vec::new(), Vec::new(), Vec::new());
    for p in pairs {
        for img in [&p.x_t, &p.x_s] {
            if img.height != size || img.width != size {
                return Err(LneError::Shape(format!(
                    "subject {}: image is {}x{}, model expects {size}x{size}",
                    p.subject_id, img.height, img.width
                )));
            }
        }
        xt.extend_from_slice(&p.x_t.data);
        xs.extend_from_slice(&p.x_s.data);
        dt.push(p.delta_t as f32);
    }
    let n = dt.len();
    if n == 0 {
        return Err(LneError::Invalid("empty batch".into()));
    }
    Ok(StepBatch {
        x_t: Tensor::new(vec![n, 1, size, size], xt)?,
        x_s: Tensor::new(vec![n, 1, size, size], xs)?,
        delta_t: dt,
    })
}

#[derive(Default)]
struct Accum {
    total: f64,
    total_n: usize,
    recon: f64,
    recon_n: usize,
    cos: f64,
    cos_n: usize,
}

impl Accum {
    fn finish(&self, epoch: usize, split: Split, seconds: f64) -> EpochMetrics {
        let avg = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
        EpochMetrics {
            epoch,
            split,
            total_loss: avg(self.total, self.total_n),
            recon_loss: avg(self.recon, self.recon_n),
            cos_dh: avg(self.cos, self.cos_n),
            n_pairs: self.recon_n,
            seconds,
        }
    }
}

/// Eval-mode losses over `pairs` in fixed order, without augmentation.
/// Batches of a single pair contribute to the reconstruction average only.
pub fn evaluate_pairs(
    params: &ModelParams<f32>,
    arch: &Architecture,
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    epoch: usize,
) -> Result<EpochMetrics> {
    let start = Instant::now();
    let mut acc = Accum::default();
    let recon_only = TrainConfig {
        method: Method::Ae,
        ..cfg.clone()
    };
    for chunk in pairs.chunks(cfg.batch_size) {
        let batch = pairs_to_batch(chunk, arch.input_size)?;
        let n = batch.len();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false)?;
        let c = if n < 2 { &recon_only } else { cfg };
        let out = step_forward(&mut tape, params, &bound, arch, &batch, c, Mode::Eval)?;
        acc.recon += tape.value(out.parts.recon).item() as f64 * n as f64;
        acc.recon_n += n;
        if n >= 2 {
            acc.total += tape.value(out.parts.total).item() as f64 * n as f64;
            acc.total_n += n;
        }
        if let Some(c) = out.cos_dh {
            acc.cos += tape.value(c).item() as f64 * n as f64;
            acc.cos_n += n;
        }
    }
    Ok(acc.finish(epoch, Split::Val, start.elapsed().as_secs_f64()))
}

fn train_epoch(
    state: &mut TrainState,
    arch: &Architecture,
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    epoch: usize,
) -> Result<EpochMetrics> {
    let start = Instant::now();
    let stream = SeedStream::new(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut stream.derive("shuffle").index(epoch as u64).rng());
    let adam = cfg.adam();
    let mut acc = Accum::default();
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        if idx.len() < 2 {
            log::debug!("epoch {epoch}: dropping trailing batch of {} pair", idx.len());
            continue;
        }
        let batch = if cfg.augment {
            let mut rng = stream.derive("augment").index(epoch as u64).index(b as u64).rng();
            let aug: Vec<ImagePair> = idx.iter().map(|&i| augment_pair(&pairs[i], &mut rng).0).collect();
            pairs_to_batch(&aug, arch.input_size)?
        } else {
            pairs_to_batch(idx.iter().map(|&i| &pairs[i]), arch.input_size)?
        };
        let n = batch.len() as f64;
        let mut tape = Tape::new();
        let bound = state.params.bind(&mut tape, |_| true)?;
        let out = step_forward(&mut tape, &state.params, &bound, arch, &batch, cfg, Mode::Train)?;
        acc.total += tape.value(out.parts.total).item() as f64 * n;
        acc.total_n += batch.len();
        acc.recon += tape.value(out.parts.recon).item() as f64 * n;
        acc.recon_n += batch.len();
        if let Some(c) = out.cos_dh {
            acc.cos += tape.value(c).item() as f64 * n;
            acc.cos_n += batch.len();
        }
        let grads = tape.backward(out.parts.total)?;
        let mut named = BTreeMap::new();
        for (name, &var) in bound.iter() {
            named.insert(name.clone(), grads.tensor(var)?);
        }
        adam_step(&mut state.params, &named, &mut state.optimizer, &adam)?;
        apply_bn_updates(&mut state.params, &out.bn_updates)?;
    }
    Ok(acc.finish(epoch, Split::Train, start.elapsed().as_secs_f64()))
}

/// Train from `resume` (or a fresh initialisation) up to `cfg.epochs`.
///
/// Shuffling and augmentation streams are keyed by epoch, so resuming from a
/// saved state reproduces the uninterrupted trajectory. `on_epoch` runs after
/// every completed epoch.
pub fn train(
    arch: &Architecture,
    cfg: &TrainConfig,
    train_pairs: &[ImagePair],
    val_pairs: &[ImagePair],
    resume: Option<TrainState>,
    on_epoch: &mut dyn FnMut(&TrainState, &[EpochMetrics]) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if train_pairs.len() < 2 {
        return Err(LneError::Invalid(format!(
            "training needs at least 2 pairs, got {}",
            train_pairs.len()
        )));
    }
    let mut state = match resume {
        Some(s) => {
            s.params.check_compatible(&init_state(arch, cfg)?.params)?;
            if s.epoch > cfg.epochs {
                return Err(LneError::Invalid(format!(
                    "checkpoint is at epoch {}, beyond the configured {}",
                    s.epoch, cfg.epochs
                )));
            }
            s
        }
        None => init_state(arch, cfg)?,
    };
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ModelParams<f32>)> = None;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let tm = train_epoch(&mut state, arch, cfg, train_pairs, epoch)?;
        state.epoch = epoch;
        let mut row = vec![tm];
        if !val_pairs.is_empty() {
            let vm = evaluate_pairs(&state.params, arch, cfg, val_pairs, epoch)?;
            let loss = if vm.total_loss.is_nan() { vm.recon_loss } else { vm.total_loss };
            if best.as_ref().is_none_or(|b| loss < b.1) {
                best = Some((epoch, loss, state.params.clone()));
            }
            row.push(vm);
        }
        for m in &row {
            log::info!(
                "{} epoch {:>3} {:<5} loss {:.5} recon {:.5} cos {:.4} ({:.1}s)",
                cfg.method,
                m.epoch,
                m.split.as_str(),
                m.total_loss,
                m.recon_loss,
                m.cos_dh,
                m.seconds
            );
        }
        log.extend(row);
        on_epoch(&state, &log)?;
    }
    Ok(TrainOutcome {
        state,
        best: best.map(|(e, _, p)| (e, p)),
        log,
    })
}

/// CSV with one row per epoch and split.
pub fn write_epoch_log(path: &Path, log: &[EpochMetrics]) -> Result<()> {
    let mut out = String::from("epoch,split,total_loss,recon_loss,cosine_mean,wall_time,n_pairs\n");
    for m in log {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3},{}\n",
            m.epoch,
            m.split.as_str(),
            m.total_loss,
            m.recon_loss,
            m.cos_dh,
            m.seconds,
            m.n_pairs
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| LneError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| LneError::io(path, e))
}

/// Parse a log written by [`write_epoch_log`].
pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| LneError::io(path, e))?;
    let corrupt = |line: usize, reason: &str| LneError::Corrupt {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(corrupt(i + 1, "expected 7 fields"));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| corrupt(i + 1, "bad number"));
        let int = |k: usize| f[k].parse::<usize>().map_err(|_| corrupt(i + 1, "bad integer"));
        out.push(EpochMetrics {
            epoch: int(0)?,
            split: match f[1] {
                "train" => Split::Train,
                "val" => Split::Val,
                _ => return Err(corrupt(i + 1, "unknown split")),
            },
            total_loss: num(2)?,
            recon_loss: num(3)?,
            cos_dh: num(4)?,
            seconds: num(5)?,
            n_pairs: int(6)?,
        });
    }
    Ok(out)
}
