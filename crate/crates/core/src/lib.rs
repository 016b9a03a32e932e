//! Longitudinal neighbourhood embedding (LNE): self-supervised representation
//! learning on pairs of same-subject scans, where each pair's latent
//! trajectory vector is pulled toward the direction pooled from its k-nearest
//! neighbours in a graph rebuilt on every mini-batch.
//!
//! Module map:
//! - [`autodiff`]: reverse-mode tape and finite-difference checker.
//! - [`cohort`]: synthetic longitudinal cohorts, pairs, augmentation, folds, dataset I/O.
//! - [`model`]: convolutional encoder/decoder, MLP heads, checkpoints.
//! - [`graph`]: trajectory vectors, k-NN graph, Gaussian adjacency, pooled embeddings.
//! - [`training`]: LNE / AE / LSSL objectives, Adam, the training loop.
//! - [`evalviz`]: downstream heads, metrics, PCA, robust curve fit, plots, cross-validation.
//! - [`config`]: experiment configuration.
//! - [`verify`]: the gradient-check suite.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod cohort;
pub mod config;
pub mod error;
pub mod evalviz;
pub mod graph;
pub mod model;
pub mod par;
mod rawio;
pub mod seed;
pub mod training;
pub mod verify;

pub use error::{LneError, Result};
