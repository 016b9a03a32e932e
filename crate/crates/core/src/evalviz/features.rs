use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::cohort::{build_pairs, Cohort, Group, Image, ImagePair};
use crate::error::{LneError, Result};
use crate::model::{encode, encode_on, Architecture, BnUpdate, Bound, FeatureMode, Mode, ModelParams};

/// Downstream prediction target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Chronological age regression, one sample per scan.
    #[serde(rename = "age")]
    Age,
    /// Diagnosis-group classification, one sample per scan pair.
    #[serde(rename = "group")]
    Group,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "age" => Ok(Task::Age),
            "group" => Ok(Task::Group),
            _ => Err(LneError::Config(format!("unknown task {s:?} (expected age or group)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Age => "age",
            Task::Group => "group",
        }
    }

    pub fn default_features(self) -> FeatureMode {
        match self {
            Task::Age => FeatureMode::ZOnly,
            Task::Group => FeatureMode::ZConcatDz,
        }
    }

    pub fn is_regression(self) -> bool {
        self == Task::Age
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub x_t: Image,
    /// Follow-up scan, present for pair features.
    pub x_s: Option<Image>,
    pub delta_t: f64,
    /// Regression target (age at `x_t`).
    pub target: f64,
    /// Class index for classification.
    pub label: usize,
}

/// Groups present in `cohort`, in a fixed order; the class index of a sample is its position here.
pub fn group_classes(cohort: &Cohort) -> Result<Vec<Group>> {
    let mut classes: Vec<Group> = Vec::new();
    for s in cohort.subjects.values() {
        match s.group {
            Some(g) if !classes.contains(&g) => classes.push(g),
            Some(_) => {}
            None => return Err(LneError::Invalid(format!("subject {} has no group label", s.id))),
        }
    }
    classes.sort();
    if classes.len() < 2 {
        return Err(LneError::Degenerate("group task needs at least two groups".into()));
    }
    Ok(classes)
}

/// Age: one sample per scan (`z` features only). Group: one sample per pair.
pub fn build_samples(cohort: &Cohort, task: Task, mode: FeatureMode, classes: &[Group]) -> Result<Vec<Sample>> {
    match task {
        Task::Age => {
            if mode != FeatureMode::ZOnly {
                return Err(LneError::Config("the age task is defined on single-scan features (z)".into()));
            }
            Ok(cohort
                .visits()
                .map(|v| Sample {
                    subject_id: v.subject_id.clone(),
                    x_t: v.image.clone(),
                    x_s: None,
                    delta_t: 0.0,
                    target: v.age,
                    label: 0,
                })
                .collect())
        }
        Task::Group => build_pairs(cohort)
            .into_iter()
            .map(|p| {
                let g = p
                    .group
                    .ok_or_else(|| LneError::Invalid(format!("subject {} has no group label", p.subject_id)))?;
                let label = classes
                    .iter()
                    .position(|&c| c == g)
                    .ok_or_else(|| LneError::Invalid(format!("group {g} is not among the classes")))?;
                Ok(Sample {
                    subject_id: p.subject_id,
                    x_t: p.x_t,
                    x_s: (mode == FeatureMode::ZConcatDz).then_some(p.x_s),
                    delta_t: p.delta_t,
                    target: p.age_t,
                    label,
                })
            })
            .collect(),
    }
}

fn stack<'a>(images: impl Iterator<Item = &'a Image>, size: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        if img.height != size || img.width != size {
            return Err(LneError::Shape(format!(
                "image is {}x{}, model expects {size}x{size}",
                img.height, img.width
            )));
        }
        data.extend_from_slice(&img.data);
        n += 1;
    }
    Tensor::new(vec![n, 1, size, size], data)
}

fn pair_images(samples: &[Sample]) -> Result<impl Iterator<Item = &Image>> {
    if samples.iter().any(|s| s.x_s.is_none()) {
        return Err(LneError::Config("pair features need follow-up scans".into()));
    }
    Ok(samples.iter().filter_map(|s| s.x_s.as_ref()))
}

/// `[z_t, (z_s − z_t)/Δt]` rows.
fn concat_dz(z_t: &Tensor<f32>, z_s: &Tensor<f32>, samples: &[Sample]) -> Result<Tensor<f32>> {
    let d = z_t.shape()[1];
    let mut out = Vec::with_capacity(samples.len() * 2 * d);
    for (i, s) in samples.iter().enumerate() {
        let (a, b) = (&z_t.data()[i * d..(i + 1) * d], &z_s.data()[i * d..(i + 1) * d]);
        out.extend_from_slice(a);
        out.extend(a.iter().zip(b).map(|(x, y)| (y - x) / s.delta_t as f32));
    }
    Tensor::new(vec![samples.len(), 2 * d], out)
}

/// Eval-mode features for every sample.
pub fn extract_features(
    params: &ModelParams<f32>,
    arch: &Architecture,
    samples: &[Sample],
    mode: FeatureMode,
) -> Result<Tensor<f32>> {
    if samples.is_empty() {
        return Err(LneError::Invalid("no samples to encode".into()));
    }
    let z_t = encode(params, arch, &stack(samples.iter().map(|s| &s.x_t), arch.input_size)?)?;
    match mode {
        FeatureMode::ZOnly => Ok(z_t),
        FeatureMode::ZConcatDz => {
            let z_s = encode(params, arch, &stack(pair_images(samples)?, arch.input_size)?)?;
            concat_dz(&z_t, &z_s, samples)
        }
    }
}

/// Eval-mode latents of a set of pairs, as `f64` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLatents {
    pub z_t: Vec<Vec<f64>>,
    pub z_s: Vec<Vec<f64>>,
    /// `(z_s − z_t) / Δt`.
    pub dz: Vec<Vec<f64>>,
}

pub fn encode_pairs(params: &ModelParams<f32>, arch: &Architecture, pairs: &[ImagePair]) -> Result<PairLatents> {
    if pairs.is_empty() {
        return Err(LneError::Invalid("no pairs to encode".into()));
    }
    let rows = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
        let d = t.shape()[1];
        t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    };
    let z_t = rows(&encode(params, arch, &stack(pairs.iter().map(|p| &p.x_t), arch.input_size)?)?);
    let z_s = rows(&encode(params, arch, &stack(pairs.iter().map(|p| &p.x_s), arch.input_size)?)?);
    let dz = z_t
        .iter()
        .zip(&z_s)
        .zip(pairs)
        .map(|((a, b), p)| a.iter().zip(b).map(|(x, y)| (y - x) / p.delta_t).collect())
        .collect();
    Ok(PairLatents { z_t, z_s, dz })
}

/// Selection matrix placing a `[N,d]` block at column `offset` of a `[N,width]` output via `dense`.
fn embed_columns(tape: &mut Tape<f32>, x: Var, d: usize, width: usize, offset: usize) -> Result<Var> {
    let w = tape.constant(Tensor::from_fn(vec![width, d], |k| {
        let (r, c) = (k / d, k % d);
        if r == offset + c {
            1.0
        } else {
            0.0
        }
    }))?;
    let b = tape.constant(Tensor::zeros(vec![width]))?;
    tape.dense(x, w, b)
}

/// Features on a tape, so gradients reach the encoder.
#[allow(clippy::too_many_arguments)]
pub fn features_on(
    tape: &mut Tape<f32>,
    params: &ModelParams<f32>,
    bound: &Bound,
    arch: &Architecture,
    samples: &[Sample],
    mode: FeatureMode,
    bn_mode: Mode,
    updates: &mut Vec<BnUpdate<f32>>,
) -> Result<Var> {
    let n = samples.len();
    match mode {
        FeatureMode::ZOnly => {
            let x = tape.constant(stack(samples.iter().map(|s| &s.x_t), arch.input_size)?)?;
            encode_on(tape, params, bound, arch, x, bn_mode, updates)
        }
        FeatureMode::ZConcatDz => {
            let xt = tape.constant(stack(samples.iter().map(|s| &s.x_t), arch.input_size)?)?;
            let xs = tape.constant(stack(pair_images(samples)?, arch.input_size)?)?;
            let x = tape.concat_rows(&[xt, xs])?;
            let z = encode_on(tape, params, bound, arch, x, bn_mode, updates)?;
            let z_t = tape.slice_rows(z, 0, n)?;
            let z_s = tape.slice_rows(z, n, 2 * n)?;
            let dt: Vec<f32> = samples.iter().map(|s| s.delta_t as f32).collect();
            let dz = crate::graph::trajectory_vectors_on(tape, z_t, z_s, &dt)?;
            let d = arch.latent_dim();
            let a = embed_columns(tape, z_t, d, 2 * d, 0)?;
            let b = embed_columns(tape, dz, d, 2 * d, d)?;
            tape.add(a, b)
        }
    }
}

/// Per-column affine standardization fitted on training features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub inv_sd: Vec<f32>,
}

impl Standardizer {
    pub fn fit(x: &Tensor<f32>) -> Result<Self> {
        let (n, d) = (x.shape()[0], x.numel() / x.shape()[0]);
        if n < 2 {
            return Err(LneError::Invalid("standardization needs at least 2 rows".into()));
        }
        let mut mean = vec![0.0f64; d];
        for row in x.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += *v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; d];
        for row in x.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (*v as f64 - m).powi(2);
            }
        }
        Ok(Standardizer {
            mean: mean.iter().map(|&m| m as f32).collect(),
            inv_sd: var
                .iter()
                .map(|&s| {
                    let sd = (s / (n - 1) as f64).sqrt();
                    if sd > 1e-8 {
                        (1.0 / sd) as f32
                    } else {
                        1.0
                    }
                })
                .collect(),
        })
    }

    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.mean.len();
        let data = x
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&self.mean).zip(&self.inv_sd).map(|((v, m), s)| (v - m) * s))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn apply_on(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let rows = tape.value(x).shape()[0];
        let m = tape.constant(Tensor::new(vec![self.mean.len()], self.mean.clone())?)?;
        let s = tape.constant(Tensor::new(vec![self.inv_sd.len()], self.inv_sd.clone())?)?;
        let m = tape.broadcast_rows(m, rows)?;
        let s = tape.broadcast_rows(s, rows)?;
        let c = tape.sub(x, m)?;
        tape.mul(c, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, GeneratorConfig};
    use crate::model::init_params;

    fn small() -> (Cohort, Architecture, ModelParams<f32>) {
        let cohort = generate_cohort(&GeneratorConfig {
            n_subjects: 6,
            image_size: 16,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let arch = Architecture {
            encoder_channels: vec![4, 4, 4, 4],
            decoder_channels: vec![4, 4, 4, 4],
            ..Architecture::default()
        }
        .with_input_size(16);
        let params = init_params(&arch, 1).unwrap();
        (cohort, arch, params)
    }

    #[test]
    fn feature_dims_and_mismatch() {
        let (cohort, arch, params) = small();
        let age = build_samples(&cohort, Task::Age, FeatureMode::ZOnly, &[]).unwrap();
        assert_eq!(age.len(), cohort.n_visits());
        let f = extract_features(&params, &arch, &age, FeatureMode::ZOnly).unwrap();
        assert_eq!(f.shape(), &[age.len(), arch.latent_dim()]);
        assert!(f.is_finite());
        assert!(build_samples(&cohort, Task::Age, FeatureMode::ZConcatDz, &[]).is_err());
        let classes = vec![Group::Nc, Group::Ad];
        let pairs = build_samples(&cohort, Task::Group, FeatureMode::ZConcatDz, &classes).unwrap();
        let f = extract_features(&params, &arch, &pairs, FeatureMode::ZConcatDz).unwrap();
        assert_eq!(f.shape()[1], 2 * arch.latent_dim());
    }

    #[test]
    fn tape_features_match_eval_features() {
        let (cohort, arch, params) = small();
        let classes = vec![Group::Nc, Group::Ad];
        let pairs = build_samples(&cohort, Task::Group, FeatureMode::ZConcatDz, &classes).unwrap();
        let direct = extract_features(&params, &arch, &pairs, FeatureMode::ZConcatDz).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false).unwrap();
        let v = features_on(&mut tape, &params, &bound, &arch, &pairs, FeatureMode::ZConcatDz, Mode::Eval, &mut Vec::new()).unwrap();
        for (a, b) in tape.value(v).data().iter().zip(direct.data()) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn standardizer_centers() {
        let x = Tensor::new(vec![3, 2], vec![1.0f32, 10.0, 2.0, 10.0, 3.0, 10.0]).unwrap();
        let s = Standardizer::fit(&x).unwrap();
        let y = s.apply(&x).unwrap();
        assert_eq!(y.data(), &[-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
