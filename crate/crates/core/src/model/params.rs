use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{LneError, Result};
use crate::seed::SeedStream;

use super::Architecture;

/// Named parameter arrays. Names are unique and iterate in sorted order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Running batchnorm statistics are state, not trainable parameters.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

/// Batchnorm affine parameters are excluded from weight decay.
pub fn is_decay_exempt(name: &str) -> bool {
    name.contains(".bn.")
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| LneError::Invalid(format!("missing parameter tensor {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| LneError::Invalid(format!("missing parameter tensor {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| is_trainable(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Merge another parameter set in (e.g. a head next to an encoder).
    pub fn extend(&mut self, other: ModelParams<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Tensors whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ModelParams<T> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Check that every tensor of `template` exists here with the same shape.
    pub fn check_compatible(&self, template: &ModelParams<T>) -> Result<()> {
        for (name, t) in &template.tensors {
            let Some(mine) = self.tensors.get(name) else {
                return Err(LneError::Shape(format!("checkpoint lacks tensor {name:?}")));
            };
            if mine.shape() != t.shape() {
                return Err(LneError::Shape(format!(
                    "tensor {name:?} has shape {:?}, architecture expects {:?}",
                    mine.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Register every tensor accepted by `trainable` as a `requires_grad`
    /// leaf; the rest stay off the tape and are read directly.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            if !is_trainable(name) {
                continue;
            }
            let v = tape.leaf(t.clone(), trainable(name))?;
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }
}

/// Parameter tensors registered on one tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| LneError::Invalid(format!("parameter {name:?} is not bound on this tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Leaky-ReLU gain `sqrt(2 / (1 + slope²))`.
pub(crate) fn leaky_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

pub(crate) fn kaiming<T: Real>(shape: Vec<usize>, fan_in: usize, gain: f64, stream: SeedStream) -> Tensor<T> {
    let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("positive std");
    let mut rng = stream.rng();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
}

fn push_conv<T: Real>(p: &mut ModelParams<T>, prefix: &str, c_in: usize, c_out: usize, slope: f64, stream: SeedStream, bn: bool) {
    let w = format!("{prefix}.conv.weight");
    p.insert(w.clone(), kaiming(vec![c_out, c_in, 3, 3], c_in * 9, leaky_gain(slope), stream.derive(&w)));
    p.insert(format!("{prefix}.conv.bias"), Tensor::zeros(vec![c_out]));
    if bn {
        p.insert(format!("{prefix}.bn.gamma"), Tensor::ones(vec![c_out]));
        p.insert(format!("{prefix}.bn.beta"), Tensor::zeros(vec![c_out]));
        p.insert(format!("{prefix}.bn.running_mean"), Tensor::zeros(vec![c_out]));
        p.insert(format!("{prefix}.bn.running_var"), Tensor::ones(vec![c_out]));
    }
}

/// Fan-in Kaiming-normal weights with leaky-ReLU gain, zero biases,
/// batchnorm gamma = 1 / beta = 0, running mean 0 / variance 1.
pub fn init_params<T: Real>(arch: &Architecture, seed: u64) -> Result<ModelParams<T>> {
    arch.validate()?;
    let stream = SeedStream::new(seed).derive("init");
    let mut p = ModelParams::new();
    let mut c_in = 1;
    for (i, &c) in arch.encoder_channels.iter().enumerate() {
        push_conv(&mut p, &format!("enc{i}"), c_in, c, arch.slope, stream, true);
        c_in = c;
    }
    for (i, &c) in arch.decoder_channels.iter().enumerate() {
        push_conv(&mut p, &format!("dec{i}"), c_in, c, arch.slope, stream, true);
        c_in = c;
    }
    // no activation follows the output conv: unit gain
    let w = "out.conv.weight";
    p.insert(w, kaiming(vec![1, c_in, 3, 3], c_in * 9, 1.0, stream.derive(w)));
    p.insert("out.conv.bias", Tensor::zeros(vec![1]));
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let a: ModelParams<f32> = init_params(&Architecture::default(), 5).unwrap();
        let b: ModelParams<f32> = init_params(&Architecture::default(), 5).unwrap();
        let c: ModelParams<f32> = init_params(&Architecture::default(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn batchnorm_affine_starts_at_identity() {
        let p: ModelParams<f32> = init_params(&Architecture::default(), 0).unwrap();
        for (name, t) in p.iter() {
            if name.ends_with(".bn.gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0));
            }
            if name.ends_with(".bn.beta") || name.ends_with(".conv.bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn default_parameter_count_is_pinned() {
        // conv weights+biases per block, plus gamma/beta per batchnorm channel
        let arch = Architecture::default();
        let mut expected = 0;
        let mut c_in = 1;
        for &c in arch.encoder_channels.iter().chain(&arch.decoder_channels) {
            expected += c * c_in * 9 + c + 2 * c;
            c_in = c;
        }
        expected += c_in * 9 + 1;
        let p: ModelParams<f32> = init_params(&arch, 0).unwrap();
        assert_eq!(p.trainable_count(), expected);
        assert_eq!(p.trainable_count(), 67_873);
    }

    #[test]
    fn incompatible_checkpoint_names_the_tensor() {
        let small: ModelParams<f32> = init_params(
            &Architecture {
                encoder_channels: vec![8, 8, 8, 8],
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let big: ModelParams<f32> = init_params(&Architecture::default(), 0).unwrap();
        let err = small.check_compatible(&big).unwrap_err().to_string();
        assert!(err.contains("dec0.conv.weight") || err.contains("enc0"), "{err}");
    }
}
