use std::fmt;
use std::str::FromStr;

use crate::cohort::{build_pairs, split_folds, Cohort, Fold, Group};
use crate::error::{LneError, Result};
use crate::model::{init_params, Architecture, HeadConfig, ModelParams};
use crate::par;
use crate::seed::SeedStream;
use crate::training::{train, EpochMetrics, Method, TrainConfig};

use super::features::{build_samples, group_classes, Task};
use super::heads::{fine_tune, fit_head_frozen, EvalMetrics, FeatureSet, HeadTraining};
use super::metrics::mean_sd;
use super::EvalConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Frozen,
    Finetune,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Frozen => "frozen",
            EvalMode::Finetune => "finetune",
        }
    }
}

impl FromStr for EvalMode {
    type Err = LneError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(EvalMode::Frozen),
            "finetune" => Ok(EvalMode::Finetune),
            _ => Err(LneError::Config(format!("unknown evaluation mode {s:?}"))),
        }
    }
}

/// A fold index, or an aggregate over folds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldTag {
    Index(usize),
    Mean,
    Sd,
}

impl fmt::Display for FoldTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FoldTag::Index(i) => write!(f, "{i}"),
            FoldTag::Mean => f.write_str("mean"),
            FoldTag::Sd => f.write_str("sd"),
        }
    }
}

impl FromStr for FoldTag {
    type Err = LneError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FoldTag::Mean),
            "sd" => Ok(FoldTag::Sd),
            _ => s
                .parse()
                .map(FoldTag::Index)
                .map_err(|_| LneError::Config(format!("bad fold tag {s:?}"))),
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub task: Task,
    /// Pretraining objective, or `none` for a randomly initialized encoder.
    pub method: String,
    pub mode: EvalMode,
    pub fold: FoldTag,
    pub r2: f64,
    pub rmse: f64,
    pub bacc: f64,
    pub n_samples: usize,
}

pub const METRICS_HEADER: &str = "task,method,mode,fold,r2,rmse,bacc,n_samples";

impl MetricsRecord {
    fn new(task: Task, method: &str, mode: EvalMode, fold: usize, m: EvalMetrics) -> Self {
        MetricsRecord {
            task,
            method: method.to_string(),
            mode,
            fold: FoldTag::Index(fold),
            r2: m.r2,
            rmse: m.rmse,
            bacc: m.bacc,
            n_samples: m.n,
        }
    }

    /// Values print in shortest round-trip form, so parsing is lossless.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.task.as_str(),
            self.method,
            self.mode.as_str(),
            self.fold,
            self.r2,
            self.rmse,
            self.bacc,
            self.n_samples
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 8 {
            return Err(LneError::Config(format!("metrics row has {} fields: {line:?}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| LneError::Config(format!("bad number {s:?}")));
        Ok(MetricsRecord {
            task: Task::parse(f[0])?,
            method: f[1].to_string(),
            mode: f[2].parse()?,
            fold: f[3].parse()?,
            r2: num(f[4])?,
            rmse: num(f[5])?,
            bacc: num(f[6])?,
            n_samples: f[7].parse().map_err(|_| LneError::Config(format!("bad count {:?}", f[7])))?,
        })
    }

    /// Bitwise comparison that treats NaN fields as equal.
    pub fn same_as(&self, other: &Self) -> bool {
        self.task == other.task
            && self.method == other.method
            && self.mode == other.mode
            && self.fold == other.fold
            && self.r2.to_bits() == other.r2.to_bits()
            && self.rmse.to_bits() == other.rmse.to_bits()
            && self.bacc.to_bits() == other.bacc.to_bits()
            && self.n_samples == other.n_samples
    }
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(LneError::Config("metrics file lacks the expected header".into()));
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRecord::parse_row).collect()
}

/// Mean and sample-sd rows per (task, method, mode), in first-seen order.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    let mut keys: Vec<(Task, String, EvalMode)> = Vec::new();
    for r in records.iter().filter(|r| matches!(r.fold, FoldTag::Index(_))) {
        let k = (r.task, r.method.clone(), r.mode);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (task, method, mode) in keys {
        let rows: Vec<&MetricsRecord> = records
            .iter()
            .filter(|r| matches!(r.fold, FoldTag::Index(_)) && r.task == task && r.method == method && r.mode == mode)
            .collect();
        let col = |f: fn(&MetricsRecord) -> f64| mean_sd(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (r2, rmse, bacc) = (col(|r| r.r2), col(|r| r.rmse), col(|r| r.bacc));
        let n: usize = rows.iter().map(|r| r.n_samples).sum();
        for (fold, pick) in [(FoldTag::Mean, 0), (FoldTag::Sd, 1)] {
            let g = |p: (f64, f64)| if pick == 0 { p.0 } else { p.1 };
            out.push(MetricsRecord {
                task,
                method: method.clone(),
                mode,
                fold,
                r2: g(r2),
                rmse: g(rmse),
                bacc: g(bacc),
                n_samples: n,
            });
        }
    }
    out
}

/// A pretraining run of one fold.
#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub fold: usize,
    pub method: Method,
    pub params: ModelParams<f32>,
    pub log: Vec<EpochMetrics>,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    /// Per-fold rows followed by the aggregate rows.
    pub records: Vec<MetricsRecord>,
    pub runs: Vec<PretrainRun>,
}

/// The subject-level folds used by [`cross_validate`].
pub fn cv_folds(cohort: &Cohort, cfg: &EvalConfig) -> Result<Vec<Fold>> {
    split_folds(&cohort.subject_ids(), cfg.folds, SeedStream::new(cfg.seed).derive("folds").seed())
}

/// Pretraining seed of fold `f`.
pub fn fold_seed(training_seed: u64, f: usize) -> u64 {
    SeedStream::new(training_seed).index(f as u64).seed()
}

/// Fit frozen (and, if configured, fine-tuned) heads for every configured
/// task on the fold's training subjects and score them on its test subjects.
pub fn evaluate_encoder(
    cohort: &Cohort,
    fold_split: &Fold,
    encoder: &ModelParams<f32>,
    arch: &Architecture,
    cfg: &EvalConfig,
    label: &str,
) -> Result<Vec<MetricsRecord>> {
    let fold = fold_split.index;
    let (train_ids, val_ids, test_ids) = (&fold_split.train, &fold_split.val, &fold_split.test);
    let mut out = Vec::new();
    for &task in &cfg.tasks {
        let mode = cfg.feature_mode.unwrap_or(task.default_features());
        let classes: Vec<Group> = if task == Task::Group {
            group_classes(cohort)?
        } else {
            Vec::new()
        };
        let samples = |ids: &[String]| build_samples(&cohort.subset(ids), task, mode, &classes);
        let (tr, va, te) = (samples(train_ids)?, samples(val_ids)?, samples(test_ids)?);
        let sets = |s: &[_]| FeatureSet::from_samples(encoder, arch, s, mode);
        let (ftr, fva, fte) = (sets(&tr)?, sets(&va)?, sets(&te)?);
        let n_out = if task.is_regression() { 1 } else { classes.len() };
        let head_cfg = HeadConfig::new(arch.latent_dim(), n_out, mode);
        let stream = SeedStream::new(cfg.seed).derive(task.as_str()).index(fold as u64);
        let frozen_opts = HeadTraining {
            epochs: cfg.head_epochs,
            batch_size: cfg.head_batch_size,
            learning_rate: cfg.head_learning_rate,
            weight_decay: cfg.head_weight_decay,
            seed: stream.derive("frozen").seed(),
        };
        let head = fit_head_frozen(&ftr, &fva, task, classes.len(), &head_cfg, &frozen_opts)?;
        let m = head.evaluate(&fte)?;
        log::info!("fold {fold} {label} {} frozen: r2 {:.4} bacc {:.4}", task.as_str(), m.r2, m.bacc);
        out.push(MetricsRecord::new(task, label, EvalMode::Frozen, fold, m));
        if cfg.finetune {
            let ft_opts = HeadTraining {
                epochs: cfg.finetune_epochs,
                learning_rate: cfg.finetune_learning_rate,
                seed: stream.derive("finetune").seed(),
                ..frozen_opts
            };
            let tuned = fine_tune(encoder, arch, mode, &head, &tr, &va, &ft_opts)?;
            let m = tuned.evaluate(arch, &te, mode)?;
            log::info!("fold {fold} {label} {} finetune: r2 {:.4} bacc {:.4}", task.as_str(), m.r2, m.bacc);
            out.push(MetricsRecord::new(task, label, EvalMode::Finetune, fold, m));
        }
    }
    Ok(out)
}

/// Subject-level k-fold pipeline: per fold, pretrain every configured
/// method on the training subjects (validation carve-out for model
/// selection), then fit frozen and fine-tuned heads and score them on the
/// held-out subjects. Folds run concurrently; results are assembled in
/// fold order so the output does not depend on scheduling.
pub fn cross_validate(cohort: &Cohort, arch: &Architecture, train_cfg: &TrainConfig, cfg: &EvalConfig) -> Result<CvOutcome> {
    cfg.validate()?;
    let folds = cv_folds(cohort, cfg)?;
    let per_fold = par::map_range(folds.len(), |f| -> Result<(Vec<MetricsRecord>, Vec<PretrainRun>)> {
        let fold = &folds[f];
        let train_pairs = build_pairs(&cohort.subset(&fold.train));
        let val_pairs = build_pairs(&cohort.subset(&fold.val));
        let seed = fold_seed(train_cfg.seed, f);
        let mut records = Vec::new();
        let mut runs = Vec::new();
        for &method in &cfg.methods {
            let tc = TrainConfig {
                method,
                seed,
                ..train_cfg.clone()
            };
            log::info!("fold {f}: pretraining {method} on {} pairs", train_pairs.len());
            let outcome = train(arch, &tc, &train_pairs, &val_pairs, None, &mut |_, _| Ok(()))?;
            records.extend(evaluate_encoder(cohort, fold, &outcome.state.params, arch, cfg, method.as_str())?);
            runs.push(PretrainRun {
                fold: f,
                method,
                params: outcome.state.params,
                log: outcome.log,
            });
        }
        if cfg.no_pretrain {
            let encoder = init_params::<f32>(arch, SeedStream::new(seed).derive("model").seed())?;
            records.extend(evaluate_encoder(cohort, fold, &encoder, arch, cfg, "none")?);
        }
        Ok((records, runs))
    });
    let mut records = Vec::new();
    let mut runs = Vec::new();
    for r in per_fold {
        let (rec, run) = r?;
        records.extend(rec);
        runs.extend(run);
    }
    let agg = aggregate(&records);
    records.extend(agg);
    Ok(CvOutcome { records, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(fold: usize, r2: f64) -> MetricsRecord {
        MetricsRecord {
            task: Task::Age,
            method: "LNE".into(),
            mode: EvalMode::Frozen,
            fold: FoldTag::Index(fold),
            r2,
            rmse: 1.0 / 3.0,
            bacc: f64::NAN,
            n_samples: 10,
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let mut rows: Vec<MetricsRecord> = (0..5).map(|f| rec(f, 0.1 * f as f64 + 1e-17)).collect();
        rows.extend(aggregate(&rows));
        let back = metrics_from_csv(&metrics_to_csv(&rows)).unwrap();
        assert_eq!(back.len(), rows.len());
        assert!(back.iter().zip(&rows).all(|(a, b)| a.same_as(b)));
    }

    #[test]
    fn aggregate_mean_is_arithmetic_mean() {
        let rows: Vec<MetricsRecord> = [0.1, 0.2, 0.6].iter().enumerate().map(|(f, &r)| rec(f, r)).collect();
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].fold, FoldTag::Mean);
        assert_eq!(agg[0].r2, (0.1 + 0.2 + 0.6) / 3.0);
        assert_eq!(agg[0].n_samples, 30);
        assert_eq!(agg[1].fold, FoldTag::Sd);
    }
}
