//! Gradient-check suite: every differentiable tape op plus the composite
//! training objectives on a micro model, compared against central finite
//! differences at 64-bit over many seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{grad_check_frozen_routing, grad_check_with, Tape, Tensor, Var};
use crate::error::Result;
use crate::graph::NeighborhoodGraph;
use crate::model::{init_params, Architecture, Bound, Mode, ModelParams};
use crate::par;
use crate::seed::{Rng, SeedStream};
use crate::training::{step_forward, step_forward_with, FrozenTargets, Method, StepBatch, TrainConfig, LSSL_TAU};

/// Finite-difference step for every check.
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
/// Batchnorm and whole-model objectives.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

type CheckFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    f: CheckFn,
}

struct CheckSpec {
    name: &'static str,
    tolerance: f64,
    build: fn(&mut Rng) -> Result<Case>,
    /// Replay the unperturbed branch choices of leaky-ReLU and max-pool.
    frozen_routing: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    /// Worst relative error over all seeds and coordinates.
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub seeds: usize,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<28} {:>12} {:>9} {:>6} {:>7}  status\n", "check", "max_rel_err", "tol", "seeds", "coords");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<28} {:>12.3e} {:>9.0e} {:>6} {:>7}  {}",
                c.name,
                c.max_rel_error,
                c.tolerance,
                c.seeds,
                c.coordinates,
                if c.passed() {
                    "ok".to_string()
                } else {
                    format!("FAIL (seed {})", c.worst_seed)
                }
            );
        }
        let _ = writeln!(
            s,
            "{} checks, {} failed, {:.1}s",
            self.checks.len(),
            self.failures().len(),
            self.seconds
        );
        s
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub base_seed: u64,
    /// Only run checks whose name contains this substring.
    pub filter: Option<String>,
    /// Deliberately corrupt the analytic gradient of the named check.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: 20,
            base_seed: 0,
            filter: None,
            corrupt: None,
        }
    }
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so the leaky-ReLU kink is never straddled.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(0.1..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values with gaps far larger than the step, so no pooling window is near a tie.
fn well_separated(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    Tensor::from_fn(shape.to_vec(), |i| order[i] as f64 * 0.1 + rng.random_range(-0.02..0.02))
}

/// Scalar `Σ out ⊙ R` for a fixed random `R`, exercising the full Jacobian.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone())?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn case(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static) -> Result<Case> {
    Ok(Case {
        inputs,
        f: Box::new(f),
    })
}

fn conv2d_case(rng: &mut Rng) -> Result<Case> {
    let r = normal(rng, &[2, 3, 5, 5]);
    case(
        vec![normal(rng, &[2, 2, 5, 5]), normal(rng, &[3, 2, 3, 3]), normal(rng, &[3])],
        move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            project(t, y, &r)
        },
    )
}

fn leaky_relu_case(rng: &mut Rng) -> Result<Case> {
    let r = normal(rng, &[3, 7]);
    case(vec![away_from_zero(rng, &[3, 7])], move |t, v| {
        let y = t.leaky_relu(v[0], 0.2)?;
        project(t, y, &r)
    })
}

fn maxpool2_case(rng: &mut Rng) -> Result<Case> {
    let r = normal(rng, &[2, 2, 2, 2]);
    case(vec![well_separated(rng, &[2, 2, 4, 4])], move |t, v| {
        let y = t.maxpool2(v[0])?;
        project(t, y, &r)
    })
}

fn upsample2_case(rng: &mut Rng) -> Result<Case> {
    let r = normal(rng, &[1, 2, 6, 6]);
    case(vec![normal(rng, &[1, 2, 3, 3])], move |t, v| {
        let y = t.upsample2(v[0])?;
        project(t, y, &r)
    })
}

fn batchnorm_train_case(rng: &mut Rng) -> Result<Case> {
    let r = normal(rng, &[4, 3, 2, 2]);
    case(
        vec![normal(rng, &[4, 3, 2, 2]), uniform(rng, &[3], 0.5, 1.5), normal(rng, &[3])],
        move |t, v| {
            let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y, &r)
        },
    )
}

fn batchnorm_eval_case(rng: &mut Rng) -> Result<Case> {
    let r = normal(rng, &[3, 2, 2, 2]);
    let mean = normal(rng, &[2]).into_data();
    let var = uniform(rng, &[2], 0.5, 2.0).into_data();
    case(
        vec![normal(rng, &[3, 2, 2, 2]), uniform(rng, &[2], 0.5, 1.5), normal(rng, &[2])],
        move |t, v| {
            let y = t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            project(t, y, &r)
        },
    )
}

fn dense_case(rng: &mut Rng) -> Result<Case> {
    let r = normal(rng, &[3, 4]);
    case(
        vec![normal(rng, &[3, 5]), normal(rng, &[4, 5]), normal(rng, &[4])],
        move |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            project(t, y, &r)
        },
    )
}

fn cosine_case(rng: &mut Rng) -> Result<Case> {
    let r = normal(rng, &[4]);
    case(vec![normal(rng, &[4, 6]), normal(rng, &[4, 6])], move |t, v| {
        let y = t.cosine_similarity(v[0], v[1], 1e-8)?;
        project(t, y, &r)
    })
}

fn mse_case(rng: &mut Rng) -> Result<Case> {
    case(vec![normal(rng, &[3, 4]), normal(rng, &[3, 4])], |t, v| t.mse(v[0], v[1]))
}

fn reductions_case(rng: &mut Rng) -> Result<Case> {
    case(vec![normal(rng, &[3, 4])], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let s = t.sum(sq)?;
        let m = t.mean(v[0])?;
        let m = t.scale(m, 3.0)?;
        t.add(s, m)
    })
}

fn elementwise_case(rng: &mut Rng) -> Result<Case> {
    let r = normal(rng, &[3, 4]);
    case(vec![normal(rng, &[3, 4]), normal(rng, &[3, 4])], move |t, v| {
        let p = t.mul(v[0], v[1])?;
        let s = t.add(v[0], v[1])?;
        let s = t.scale(s, 0.7)?;
        let y = t.sub(p, s)?;
        project(t, y, &r)
    })
}

fn row_div_case(rng: &mut Rng) -> Result<Case> {
    let r = normal(rng, &[4, 3]);
    let d = uniform(rng, &[4], 0.5, 3.0).into_data();
    case(vec![normal(rng, &[4, 3])], move |t, v| {
        let y = t.row_div(v[0], &d)?;
        project(t, y, &r)
    })
}

fn shape_ops_case(rng: &mut Rng) -> Result<Case> {
    let r = normal(rng, &[3, 6]);
    case(vec![normal(rng, &[2, 2, 3]), normal(rng, &[3, 6])], move |t, v| {
        let a = t.reshape(v[0], &[2, 6])?;
        let c = t.concat_rows(&[a, v[1]])?;
        let y = t.slice_rows(c, 1, 4)?;
        project(t, y, &r)
    })
}

fn graph_pool_case(rng: &mut Rng) -> Result<Case> {
    let z = normal(rng, &[6, 3]);
    let w = NeighborhoodGraph::build(&z, 5)?.weights()?;
    let r = normal(rng, &[6, 4]);
    case(vec![normal(rng, &[6, 4])], move |t, v| {
        let y = t.matmul_const(&w, v[0])?;
        project(t, y, &r)
    })
}

fn broadcast_case(rng: &mut Rng) -> Result<Case> {
    let r = normal(rng, &[4, 5]);
    case(vec![normal(rng, &[5])], move |t, v| {
        let y = t.broadcast_rows(v[0], 4)?;
        project(t, y, &r)
    })
}

fn xent_case(rng: &mut Rng) -> Result<Case> {
    let targets: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
    let w = uniform(rng, &[3], 0.2, 1.0).into_data();
    case(vec![normal(rng, &[6, 3])], move |t, v| t.softmax_cross_entropy(v[0], &targets, &w))
}

/// 16×16 inputs, latent 2×2×2 (dimension 8).
pub fn micro_architecture() -> Architecture {
    Architecture {
        encoder_channels: vec![2, 2, 2],
        decoder_channels: vec![2, 2, 2],
        input_size: 16,
        slope: 0.2,
    }
}

/// Conv biases feeding a training-mode batchnorm have an identically zero
/// gradient (the batch mean absorbs them); finite differences there only
/// measure roundoff, so they are held constant. Their gradient path is
/// covered by the standalone conv check.
fn is_checked(name: &str) -> bool {
    crate::model::is_trainable(name) && !((name.starts_with("enc") || name.starts_with("dec")) && name.ends_with(".conv.bias"))
}

fn composite_case(rng: &mut Rng, method: Method, detach: bool, only: Option<&str>) -> Result<Case> {
    let arch = micro_architecture();
    let n = 4;
    let mut params: ModelParams<f64> = init_params(&arch, rng.random())?;
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bn.gamma") {
            *t = uniform(rng, t.shape(), 0.7, 1.3);
        } else if name.ends_with(".bn.beta") || name.ends_with(".conv.bias") {
            *t = uniform(rng, t.shape(), -0.2, 0.2);
        }
    }
    if method == Method::Lssl {
        params.insert(LSSL_TAU, normal(rng, &[arch.latent_dim()]));
    }
    let batch = StepBatch {
        x_t: normal(rng, &[n, 1, 16, 16]),
        x_s: normal(rng, &[n, 1, 16, 16]),
        delta_t: uniform(rng, &[n], 1.0, 5.0).into_data(),
    };
    let cfg = TrainConfig {
        method,
        detach_dh: detach,
        n_nb: 2,
        ..TrainConfig::default()
    };
    let checked: Vec<String> = params
        .names()
        .filter(|name| match only {
            Some(o) => name.as_str() == o,
            None => is_checked(name),
        })
        .cloned()
        .collect();
    let inputs = checked.iter().map(|k| params.get(k).cloned()).collect::<Result<Vec<_>>>()?;

    let frozen = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false)?;
        let out = step_forward(&mut tape, &params, &bound, &arch, &batch, &cfg, Mode::Train)?;
        FrozenTargets {
            graph: out.graph.expect("batch of 4"),
            dh: tape.value(out.dh.expect("batch of 4")).clone(),
        }
    };
    case(inputs, move |tape, vars| {
        let mut map = BTreeMap::new();
        for (name, t) in params.iter() {
            if !crate::model::is_trainable(name) {
                continue;
            }
            let v = match checked.iter().position(|c| c == name) {
                Some(i) => vars[i],
                None => tape.constant(t.clone())?,
            };
            map.insert(name.clone(), v);
        }
        let bound = Bound::from_vars(map);
        let out = step_forward_with(tape, &params, &bound, &arch, &batch, &cfg, Mode::Train, Some(&frozen))?;
        Ok(out.parts.total)
    })
}

fn lne_detached_case(rng: &mut Rng) -> Result<Case> {
    composite_case(rng, Method::Lne, true, None)
}

fn lne_full_case(rng: &mut Rng) -> Result<Case> {
    composite_case(rng, Method::Lne, false, None)
}

fn lssl_case(rng: &mut Rng) -> Result<Case> {
    composite_case(rng, Method::Lssl, true, None)
}

fn lssl_tau_case(rng: &mut Rng) -> Result<Case> {
    composite_case(rng, Method::Lssl, true, Some(LSSL_TAU))
}

fn autoencoder_case(rng: &mut Rng) -> Result<Case> {
    composite_case(rng, Method::Ae, true, None)
}

fn specs() -> Vec<CheckSpec> {
    let op = |name, build| CheckSpec {
        name,
        tolerance: OP_TOLERANCE,
        build,
        frozen_routing: false,
    };
    let composite = |name, build| CheckSpec {
        name,
        tolerance: COMPOSITE_TOLERANCE,
        build,
        frozen_routing: false,
    };
    let network = |name, tolerance, build| CheckSpec {
        name,
        tolerance,
        build,
        frozen_routing: true,
    };
    vec![
        op("conv2d", conv2d_case),
        op("leaky_relu", leaky_relu_case),
        op("maxpool2", maxpool2_case),
        op("upsample2", upsample2_case),
        composite("batchnorm_train", batchnorm_train_case),
        composite("batchnorm_eval", batchnorm_eval_case),
        op("dense", dense_case),
        op("cosine_similarity", cosine_case),
        op("mse", mse_case),
        op("sum_mean", reductions_case),
        op("add_sub_mul_scale", elementwise_case),
        op("row_div", row_div_case),
        op("reshape_concat_slice", shape_ops_case),
        op("graph_pool", graph_pool_case),
        op("broadcast_rows", broadcast_case),
        op("softmax_cross_entropy", xent_case),
        network("lssl_tau", OP_TOLERANCE, lssl_tau_case),
        network("autoencoder_loss", COMPOSITE_TOLERANCE, autoencoder_case),
        network("lne_loss_detached", COMPOSITE_TOLERANCE, lne_detached_case),
        network("lne_loss_full", COMPOSITE_TOLERANCE, lne_full_case),
        network("lssl_loss", COMPOSITE_TOLERANCE, lssl_case),
    ]
}

pub fn check_names() -> Vec<&'static str> {
    specs().iter().map(|s| s.name).collect()
}

/// Run every check on `opts.seeds` seeds.
pub fn run_gradcheck_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let root = SeedStream::new(opts.base_seed).derive("gradcheck");
    let mut checks = Vec::new();
    for spec in specs() {
        if let Some(f) = &opts.filter {
            if !spec.name.contains(f.as_str()) {
                continue;
            }
        }
        let corrupt = opts.corrupt.as_deref() == Some(spec.name);
        let per_seed = par::map_range(opts.seeds, |s| -> Result<(f64, usize)> {
            let mut rng = root.derive(spec.name).index(s as u64).rng();
            let c = (spec.build)(&mut rng)?;
            let tamper = |i: usize, g: &mut [f64]| {
                if corrupt && i == 0 {
                    g[0] += 1e-2 * (1.0 + g[0].abs());
                }
            };
            let report = if spec.frozen_routing {
                grad_check_frozen_routing(&c.f, &c.inputs, GRADCHECK_STEP, tamper)?
            } else {
                grad_check_with(&c.f, &c.inputs, GRADCHECK_STEP, tamper)?
            };
            log::debug!(
                "gradcheck {} seed {s}: worst input {} element {} analytic {:e} numeric {:e}",
                spec.name,
                report.worst.0,
                report.worst.1,
                report.analytic,
                report.numeric
            );
            Ok((report.max_rel_error, report.coordinates))
        });
        let mut result = CheckResult {
            name: spec.name.to_string(),
            tolerance: spec.tolerance,
            max_rel_error: 0.0,
            worst_seed: 0,
            seeds: opts.seeds,
            coordinates: 0,
        };
        for (s, r) in per_seed.into_iter().enumerate() {
            let (err, coords) = r?;
            result.coordinates += coords;
            if err > result.max_rel_error || err.is_nan() {
                result.max_rel_error = err;
                result.worst_seed = s as u64;
            }
        }
        log::info!("gradcheck {:<24} max rel err {:.3e}", result.name, result.max_rel_error);
        checks.push(result);
    }
    Ok(SuiteReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_gradient_is_named() {
        let opts = SuiteOptions {
            seeds: 2,
            filter: Some("dense".into()),
            corrupt: Some("dense".into()),
            ..SuiteOptions::default()
        };
        let r = run_gradcheck_suite(&opts).unwrap();
        assert_eq!(r.checks.len(), 1);
        assert!(!r.all_passed());
        assert_eq!(r.failures()[0].name, "dense");
        assert!(r.to_text().contains("FAIL"));
    }
}
