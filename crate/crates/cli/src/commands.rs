use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use lne_core::cohort::{build_pairs, generate_cohort, load_cohort, save_cohort, Cohort, MANIFEST_FILE};
use lne_core::config::ExperimentConfig;
use lne_core::evalviz::{
    build_field_plot, cross_validate, cv_folds, encode_pairs, evaluate_encoder, export_field_plot, fold_seed,
    group_norm_stats, metrics_to_csv, ColorKey, EvalMode, FoldTag, Task,
};
use lne_core::model::{load_checkpoint, save_checkpoint, Checkpoint, FeatureMode};
use lne_core::training::{read_epoch_log, train as run_training, write_epoch_log, Method, Split, TrainState};
use lne_core::verify::{run_gradcheck_suite, SuiteOptions};
use lne_core::LneError;
use serde_json::json;

use crate::runs::{beside, check_data, checkpoint_info, checkpoint_meta, io_error, prepare, write_text};
use crate::Failure;

pub const EPOCH_LOG: &str = "epochs.csv";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn gen_data(cfg: &ExperimentConfig, force: bool) -> Result<(), Failure> {
    let dir = &cfg.output.data_dir;
    let occupied = dir.is_dir() && fs::read_dir(dir).map_err(|e| io_error(dir, e))?.next().is_some();
    if occupied {
        if !force {
            return Err(Failure::Usage(format!(
                "{} is not empty; pass --force to overwrite it",
                dir.display()
            )));
        }
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(Failure::Usage(format!(
                "refusing to overwrite {}: it does not hold a dataset",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let cohort = generate_cohort(&cfg.generator)?;
    save_cohort(&cohort, dir)?;
    prepare(dir, cfg)?;
    let n_pairs = build_pairs(&cohort).len();
    println!("dataset     {}", dir.display());
    println!("subjects    {}", cohort.n_subjects());
    println!("visits      {}", cohort.n_visits());
    println!("pairs       {n_pairs}");
    println!("interval    {:.3} years (mean)", cohort.mean_visit_interval());
    let mut groups = std::collections::BTreeMap::new();
    for s in cohort.subjects.values() {
        *groups.entry(s.group.map(|g| g.name()).unwrap_or("unlabelled")).or_insert(0usize) += 1;
    }
    for (g, n) in groups {
        println!("group {g:<5} {n}");
    }
    Ok(())
}

fn load_data(cfg: &ExperimentConfig) -> Result<Cohort, Failure> {
    Ok(load_cohort(&cfg.output.data_dir)?)
}

pub struct TrainRequest {
    pub method: Option<Method>,
    pub fold: usize,
    pub lambda_dir: Option<f64>,
    pub epochs: Option<usize>,
    pub name: Option<String>,
    pub resume: bool,
}

fn val_loss_of(row: &lne_core::training::EpochMetrics) -> f64 {
    if row.total_loss.is_nan() {
        row.recon_loss
    } else {
        row.total_loss
    }
}

/// Pretrain one fold; returns the run directory.
pub fn train(mut cfg: ExperimentConfig, req: &TrainRequest) -> Result<PathBuf, Failure> {
    if let Some(m) = req.method {
        cfg.training.method = m;
    }
    if let Some(l) = req.lambda_dir {
        cfg.training.lambda_dir = l;
    }
    if let Some(e) = req.epochs {
        cfg.training.epochs = e;
    }
    cfg.validate()?;
    let cohort = load_data(&cfg)?;
    let arch = cfg.architecture.clone();
    check_data(&cohort, &arch)?;
    let folds = cv_folds(&cohort, &cfg.evaluation)?;
    let fold = folds
        .get(req.fold)
        .ok_or_else(|| Failure::Usage(format!("fold {} out of range 0..{}", req.fold, folds.len())))?;
    let tc = lne_core::training::TrainConfig {
        seed: fold_seed(cfg.training.seed, fold.index),
        ..cfg.training.clone()
    };
    let method = tc.method;
    let name = req
        .name
        .clone()
        .unwrap_or_else(|| format!("{}-fold{}", method.as_str().to_lowercase(), fold.index));
    let dir = cfg.output.run_dir.join(name);
    let train_pairs = build_pairs(&cohort.subset(&fold.train));
    let val_pairs = build_pairs(&cohort.subset(&fold.val));

    let mut prior = Vec::new();
    let mut best_loss = f64::INFINITY;
    let resume = if req.resume {
        let ckpt = load_checkpoint(&dir.join("last"))?;
        let info = checkpoint_info(&ckpt, &arch)?;
        let same_training = info.training.as_ref().map(|t| lne_core::training::TrainConfig { epochs: tc.epochs, ..t.clone() });
        if info.arch != arch || same_training.as_ref() != Some(&tc) {
            return Err(Failure::Usage(format!(
                "{} was trained with a different configuration; refusing to resume",
                dir.display()
            )));
        }
        prior = read_epoch_log(&dir.join(EPOCH_LOG))?;
        prior.retain(|m| m.epoch <= info.epoch);
        if let Ok(best) = load_checkpoint(&dir.join("best")) {
            if let Some(v) = best.meta.get("val_loss").and_then(|v| v.as_f64()) {
                best_loss = v;
            }
        }
        log::info!("resuming {} at epoch {}", dir.display(), info.epoch);
        Some(TrainState {
            params: ckpt.params,
            optimizer: ckpt.optimizer.unwrap_or_default(),
            epoch: info.epoch,
        })
    } else {
        for stale in ["last", "best", "final"] {
            let p = dir.join(stale);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(|e| io_error(&p, e))?;
            }
        }
        None
    };
    let mut run_cfg = cfg.clone();
    run_cfg.training = tc.clone();
    prepare(&dir, &run_cfg)?;
    println!(
        "training {method} on fold {} ({} train / {} val pairs) -> {}",
        fold.index,
        train_pairs.len(),
        val_pairs.len(),
        dir.display()
    );

    let log_path = dir.join(EPOCH_LOG);
    let mut on_epoch = |state: &TrainState, log: &[lne_core::training::EpochMetrics]| -> lne_core::Result<()> {
        let full: Vec<_> = prior.iter().chain(log).cloned().collect();
        write_epoch_log(&log_path, &full)?;
        let val = log.iter().rev().find(|m| m.epoch == state.epoch && m.split == Split::Val);
        let val_loss = val.map(val_loss_of);
        save_checkpoint(
            &dir.join("last"),
            &Checkpoint {
                params: state.params.clone(),
                optimizer: Some(state.optimizer.clone()),
                step: state.optimizer.step,
                meta: checkpoint_meta(method, fold.index, state.epoch, &arch, &tc, val_loss),
            },
        )?;
        if let Some(v) = val_loss {
            if v < best_loss {
                best_loss = v;
                save_checkpoint(
                    &dir.join("best"),
                    &Checkpoint {
                        params: state.params.clone(),
                        optimizer: None,
                        step: state.optimizer.step,
                        meta: checkpoint_meta(method, fold.index, state.epoch, &arch, &tc, Some(v)),
                    },
                )?;
            }
        }
        Ok(())
    };
    let outcome = run_training(&arch, &tc, &train_pairs, &val_pairs, resume, &mut on_epoch)?;
    let state = &outcome.state;
    save_checkpoint(
        &dir.join("final"),
        &Checkpoint {
            params: state.params.clone(),
            optimizer: Some(state.optimizer.clone()),
            step: state.optimizer.step,
            meta: checkpoint_meta(method, fold.index, state.epoch, &arch, &tc, None),
        },
    )?;
    if let Some(last) = outcome.log.iter().rev().find(|m| m.split == Split::Train) {
        println!(
            "epoch {} train loss {:.6} recon {:.6} cos {:.4}",
            last.epoch, last.total_loss, last.recon_loss, last.cos_dh
        );
    }
    if best_loss.is_finite() {
        println!("best validation loss {best_loss:.6}");
    }
    Ok(dir)
}

pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub task: Task,
    pub mode: EvalMode,
    pub features: Option<FeatureMode>,
    pub fold: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn eval(mut cfg: ExperimentConfig, req: &EvalRequest) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&req.checkpoint)?;
    let info = checkpoint_info(&ckpt, &cfg.architecture)?;
    let cohort = load_data(&cfg)?;
    check_data(&cohort, &info.arch)?;
    cfg.architecture = info.arch.clone();
    cfg.evaluation.tasks = vec![req.task];
    cfg.evaluation.feature_mode = req.features;
    cfg.evaluation.finetune = req.mode == EvalMode::Finetune;
    cfg.validate()?;
    let folds = cv_folds(&cohort, &cfg.evaluation)?;
    let f = req.fold.or(info.fold).unwrap_or(0);
    let fold = folds
        .get(f)
        .ok_or_else(|| Failure::Usage(format!("fold {f} out of range 0..{}", folds.len())))?;
    let mode = req.features.unwrap_or(req.task.default_features());
    println!(
        "features {} (dim {}) for task {}",
        mode.as_str(),
        mode.input_dim(info.arch.latent_dim()),
        req.task.as_str()
    );
    let records: Vec<_> = evaluate_encoder(&cohort, fold, &ckpt.params, &info.arch, &cfg.evaluation, &info.label)?
        .into_iter()
        .filter(|r| r.mode == req.mode)
        .collect();
    let out = req.out.clone().unwrap_or_else(|| {
        beside(&req.checkpoint, &format!("eval-{}-{}", req.task.as_str(), req.mode.as_str()))
    });
    prepare(&out, &cfg)?;
    write_text(&out.join(METRICS_FILE), &metrics_to_csv(&records))?;
    for r in &records {
        println!("{} {} fold {}: r2 {:.4} rmse {:.4} bacc {:.4} (n={})", r.task.as_str(), r.mode.as_str(), r.fold, r.r2, r.rmse, r.bacc, r.n_samples);
    }
    println!("wrote {}", out.join(METRICS_FILE).display());
    Ok(())
}

pub fn plot(cfg: &ExperimentConfig, checkpoint: &Path, by_group: bool, out: Option<PathBuf>) -> Result<(), Failure> {
    let ckpt = load_checkpoint(checkpoint)?;
    let info = checkpoint_info(&ckpt, &cfg.architecture)?;
    let cohort = load_data(cfg)?;
    check_data(&cohort, &info.arch)?;
    let pairs = build_pairs(&cohort);
    let latents = encode_pairs(&ckpt.params, &info.arch, &pairs)?;
    let labels: Option<Vec<String>> = pairs.iter().map(|p| p.group.map(|g| g.name().to_string())).collect();
    let key = if by_group {
        ColorKey::Group(
            labels
                .clone()
                .ok_or_else(|| Failure::Usage("--color group needs a labelled cohort".into()))?,
        )
    } else {
        ColorKey::Age(pairs.iter().map(|p| p.age_t).collect())
    };
    let field = build_field_plot(&latents.z_t, &latents.z_s, key)?;
    let out = out.unwrap_or_else(|| beside(checkpoint, "plot"));
    let mut run_cfg = cfg.clone();
    run_cfg.architecture = info.arch.clone();
    prepare(&out, &run_cfg)?;
    export_field_plot(&field, &out.join("field.svg"), &out.join("field.csv"))?;
    let curve = json!({
        "a": field.curve.a,
        "b": field.curve.b,
        "c": field.curve.c,
        "iterations": field.curve.iterations,
        "converged": field.curve.converged,
        "pca_mean": field.pca.mean,
        "pca_components": field.pca.components,
        "pca_eigenvalues": field.pca.eigenvalues,
    });
    write_text(&out.join("curve.json"), &(serde_json::to_string_pretty(&curve).expect("json") + "\n"))?;
    println!(
        "curve y = {:.6} x^2 + {:.6} x + {:.6} ({} IRLS iterations{})",
        field.curve.a,
        field.curve.b,
        field.curve.c,
        field.curve.iterations,
        if field.curve.converged { "" } else { ", not converged" }
    );
    if let Some(labels) = labels {
        let names: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let comparisons: Vec<(String, String)> = names
            .iter()
            .enumerate()
            .flat_map(|(i, a)| names[i + 1..].iter().map(move |b| (a.clone(), b.clone())))
            .collect();
        if comparisons.is_empty() {
            log::warn!("only one group present; groups.csv not written");
        } else {
            match group_norm_stats(&latents.dz, &labels, &comparisons) {
                Ok(stats) => {
                    write_text(&out.join("groups.csv"), &stats.to_csv())?;
                    for c in &stats.comparisons {
                        println!("|dz| {} vs {}: t {:.3} df {:.1} p {:.3e}", c.a, c.b, c.test.t, c.test.df, c.test.p);
                    }
                }
                Err(LneError::Invalid(m)) => log::warn!("groups.csv not written: {m}"),
                Err(e) => return Err(e.into()),
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub struct GradcheckRequest {
    pub seeds: usize,
    pub filter: Option<String>,
    pub corrupt: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn gradcheck(req: &GradcheckRequest) -> Result<(), Failure> {
    let report = run_gradcheck_suite(&SuiteOptions {
        seeds: req.seeds,
        filter: req.filter.clone(),
        corrupt: req.corrupt.clone(),
        ..SuiteOptions::default()
    })?;
    let text = report.to_text();
    print!("{text}");
    if let Some(path) = &req.out {
        write_text(path, &text)?;
    }
    if report.checks.is_empty() {
        return Err(Failure::Usage("no gradient check matches the filter".into()));
    }
    if !report.all_passed() {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        return Err(Failure::Verification(names.join(", ")));
    }
    Ok(())
}

pub fn cv(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<(), Failure> {
    let cohort = load_data(cfg)?;
    check_data(&cohort, &cfg.architecture)?;
    let out = out.unwrap_or_else(|| cfg.output.run_dir.join("cv"));
    prepare(&out, cfg)?;
    let outcome = cross_validate(&cohort, &cfg.architecture, &cfg.training, &cfg.evaluation)?;
    let logs = out.join("pretrain");
    fs::create_dir_all(&logs).map_err(|e| io_error(&logs, e))?;
    for run in &outcome.runs {
        write_epoch_log(&logs.join(format!("{}-fold{}.csv", run.method.as_str().to_lowercase(), run.fold)), &run.log)?;
    }
    write_text(&out.join(METRICS_FILE), &metrics_to_csv(&outcome.records))?;
    for r in outcome.records.iter().filter(|r| r.fold == FoldTag::Mean) {
        println!("{:<5} {:<5} {:<8} r2 {:.4} rmse {:.4} bacc {:.4}", r.task.as_str(), r.method, r.mode.as_str(), r.r2, r.rmse, r.bacc);
    }
    println!("wrote {}", out.join(METRICS_FILE).display());
    Ok(())
}
