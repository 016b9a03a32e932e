use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{LneError, Result};
use crate::seed::SeedStream;

use super::params::{kaiming, leaky_gain};
use super::{Bound, ModelParams};

/// Which latent quantities feed a downstream head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMode {
    /// One latent `z` per image.
    #[serde(rename = "z")]
    ZOnly,
    /// `[z_t, Δz]` per pair.
    #[serde(rename = "z+dz")]
    ZConcatDz,
}

impl FeatureMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(FeatureMode::ZOnly),
            "z+dz" => Ok(FeatureMode::ZConcatDz),
            other => Err(LneError::Invalid(format!("unknown feature mode {other:?} (expected z or z+dz)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::ZOnly => "z",
            FeatureMode::ZConcatDz => "z+dz",
        }
    }

    pub fn input_dim(self, latent_dim: usize) -> usize {
        match self {
            FeatureMode::ZOnly => latent_dim,
            FeatureMode::ZConcatDz => 2 * latent_dim,
        }
    }
}

/// MLP head: `dense → leaky-ReLU` per hidden layer, then a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub feature_mode: FeatureMode,
    pub slope: f64,
}

/// Hidden widths before capping at the latent size.
pub const HEAD_HIDDEN: [usize; 2] = [1024, 64];

impl HeadConfig {
    /// Default widths `[1024, 64]`, each capped at `latent_dim`.
    pub fn new(latent_dim: usize, output_dim: usize, feature_mode: FeatureMode) -> Self {
        HeadConfig {
            hidden: HEAD_HIDDEN.iter().map(|&h| h.min(latent_dim)).collect(),
            output_dim,
            feature_mode,
            slope: 0.2,
        }
    }

    fn layers(&self, input_dim: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Fan-in Kaiming weights, zero biases, names `head.fc{i}.{weight,bias}`.
pub fn init_head<T: Real>(cfg: &HeadConfig, input_dim: usize, seed: u64) -> Result<ModelParams<T>> {
    if input_dim == 0 || cfg.output_dim == 0 || cfg.hidden.contains(&0) {
        return Err(LneError::Config("head dimensions must be positive".into()));
    }
    let stream = SeedStream::new(seed).derive("head");
    let mut p = ModelParams::new();
    let layers = cfg.layers(input_dim);
    for (i, &(n_in, n_out)) in layers.iter().enumerate() {
        let w = format!("head.fc{i}.weight");
        let gain = if i + 1 < layers.len() { leaky_gain(cfg.slope) } else { 1.0 };
        p.insert(w.clone(), kaiming(vec![n_out, n_in], n_in, gain, stream.derive(&w)));
        p.insert(format!("head.fc{i}.bias"), Tensor::zeros(vec![n_out]));
    }
    Ok(p)
}

pub fn head_forward_on<T: Real>(tape: &mut Tape<T>, bound: &Bound, cfg: &HeadConfig, features: Var) -> Result<Var> {
    let n_layers = cfg.hidden.len() + 1;
    let mut x = features;
    for i in 0..n_layers {
        x = tape.dense(x, bound.var(&format!("head.fc{i}.weight"))?, bound.var(&format!("head.fc{i}.bias"))?)?;
        if i + 1 < n_layers {
            x = tape.leaky_relu(x, T::from_f64_lossy(cfg.slope))?;
        }
    }
    Ok(x)
}

/// Predictions for `features: [N, input_dim]` without gradients.
pub fn head_forward<T: Real>(params: &ModelParams<T>, cfg: &HeadConfig, features: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false)?;
    let x = tape.constant(features.clone())?;
    let y = head_forward_on(&mut tape, &bound, cfg, x)?;
    Ok(tape.value(y).clone())
}

/// Row-wise softmax of `[N,C]` logits.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_widths_are_capped() {
        let h = HeadConfig::new(64, 1, FeatureMode::ZOnly);
        assert_eq!(h.hidden, vec![64, 64]);
        let big = HeadConfig::new(4096, 2, FeatureMode::ZConcatDz);
        assert_eq!(big.hidden, vec![1024, 64]);
    }

    #[test]
    fn zero_weights_give_the_final_bias() {
        let cfg = HeadConfig::new(8, 2, FeatureMode::ZOnly);
        let mut p: ModelParams<f64> = init_head(&cfg, 8, 0).unwrap();
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        p.get_mut("head.fc2.bias").unwrap().data_mut().copy_from_slice(&[0.5, 1.5]);
        let feats = Tensor::from_fn(vec![3, 8], |i| i as f64 - 4.0);
        let out = head_forward(&p, &cfg, &feats).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        for row in out.data().chunks(2) {
            assert_eq!(row, &[0.5, 1.5]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Tensor::new(vec![3, 2], vec![0.1f32, 3.0, -20.0, 4.0, 7.0, 7.0]).unwrap();
        for row in softmax(&logits) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn feature_modes_parse() {
        assert_eq!(FeatureMode::parse("z+dz").unwrap(), FeatureMode::ZConcatDz);
        assert_eq!(FeatureMode::ZConcatDz.input_dim(64), 128);
        assert!(FeatureMode::parse("dz").is_err());
    }
}
