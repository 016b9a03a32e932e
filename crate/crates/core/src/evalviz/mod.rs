//! Downstream evaluation, metrics, trajectory-field plots and cross-validation.

mod cv;
mod features;
mod groups;
mod heads;
mod metrics;
mod pca;
mod plot;
mod robust;

use serde::{Deserialize, Serialize};

use crate::error::{LneError, Result};
use crate::model::FeatureMode;
use crate::training::Method;

pub use cv::{
    aggregate, cross_validate, cv_folds, evaluate_encoder, fold_seed, metrics_from_csv, metrics_to_csv, CvOutcome, EvalMode, FoldTag, MetricsRecord,
    PretrainRun, METRICS_HEADER,
};
pub use features::{build_samples, encode_pairs, extract_features, features_on, group_classes, PairLatents, Sample, Standardizer, Task};
pub use groups::{euclidean_norms, group_norm_stats, GroupComparison, GroupNormStats, GroupSummary};
pub use heads::{fine_tune, fit_head_frozen, EvalMetrics, FeatureSet, FineTuned, FittedHead, HeadTraining};
pub use metrics::{bacc, class_weights, mean_sd, paired_t_less, r2, rmse, welch_t_test, WelchTest};
pub use pca::{pca_2d, Pca2, PCA_MAX_ITERS, PCA_TOL};
pub use plot::{build_field_plot, export_field_plot, render_csv, render_svg, ColorKey, PixelMap, TrajectoryFieldPlot};
pub use robust::{least_squares_quadratic, robust_quadratic_fit, QuadraticFit, HUBER_DELTA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    pub methods: Vec<Method>,
    pub tasks: Vec<Task>,
    /// Overrides the task's default features (`z` for age, `z+dz` for group).
    pub feature_mode: Option<FeatureMode>,
    pub head_epochs: usize,
    pub head_batch_size: usize,
    pub head_learning_rate: f64,
    pub head_weight_decay: f64,
    pub finetune: bool,
    pub finetune_epochs: usize,
    pub finetune_learning_rate: f64,
    /// Also evaluate a randomly initialized encoder (method `none`).
    pub no_pretrain: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: 5,
            methods: vec![Method::Lne, Method::Ae],
            tasks: vec![Task::Age],
            feature_mode: None,
            head_epochs: 200,
            head_batch_size: 64,
            head_learning_rate: 5e-4,
            head_weight_decay: 1e-5,
            finetune: true,
            finetune_epochs: 20,
            finetune_learning_rate: 5e-4,
            no_pretrain: false,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LneError::Config(m.to_string()));
        if self.folds < 2 {
            return bad("evaluation.folds must be at least 2");
        }
        if self.tasks.is_empty() {
            return bad("evaluation.tasks must not be empty");
        }
        if self.head_epochs == 0 || self.head_batch_size < 2 {
            return bad("head_epochs must be positive and head_batch_size at least 2");
        }
        if !(self.head_learning_rate > 0.0) || !(self.finetune_learning_rate > 0.0) || self.head_weight_decay < 0.0 {
            return bad("head learning rates must be positive and weight decay non-negative");
        }
        if self.tasks.contains(&Task::Age) && self.feature_mode == Some(FeatureMode::ZConcatDz) {
            return bad("the age task uses single-scan features; feature_mode z+dz applies to the group task only");
        }
        Ok(())
    }
}
