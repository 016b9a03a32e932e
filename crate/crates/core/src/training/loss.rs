use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{LneError, Result};
use crate::graph::{trajectory_vectors_on, NeighborhoodGraph};
use crate::model::{decode_on, encode_on, Architecture, BnUpdate, Bound, Mode, ModelParams};

use super::{LossWeights, Method, TrainConfig};

/// Name of the learnable global direction of the LSSL baseline.
pub const LSSL_TAU: &str = "lssl.tau";

/// Loss nodes of one step. `recon` is `mse_t + mse_s`, `cos_mean` the
/// unweighted mean cosine of the direction term.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub recon: Var,
    pub cos_mean: Option<Var>,
}

fn recon_term<T: Real>(tape: &mut Tape<T>, x_t: Var, x_s: Var, rec_t: Var, rec_s: Var) -> Result<Var> {
    let a = tape.mse(rec_t, x_t)?;
    let b = tape.mse(rec_s, x_s)?;
    tape.add(a, b)
}

fn weighted<T: Real>(tape: &mut Tape<T>, recon: Var, cos_mean: Var, w: &LossWeights) -> Result<Var> {
    let r = tape.scale(recon, T::from_f64_lossy(w.lambda_recon))?;
    let c = tape.scale(cos_mean, T::from_f64_lossy(w.lambda_dir))?;
    tape.sub(r, c)
}

/// Reconstruction-only objective `λ_recon·(mse_t + mse_s)`.
pub fn ae_loss<T: Real>(tape: &mut Tape<T>, x_t: Var, x_s: Var, rec_t: Var, rec_s: Var, w: &LossWeights) -> Result<Var> {
    Ok(ae_parts(tape, x_t, x_s, rec_t, rec_s, w)?.total)
}

fn ae_parts<T: Real>(tape: &mut Tape<T>, x_t: Var, x_s: Var, rec_t: Var, rec_s: Var, w: &LossWeights) -> Result<LossParts> {
    let recon = recon_term(tape, x_t, x_s, rec_t, rec_s)?;
    let total = tape.scale(recon, T::from_f64_lossy(w.lambda_recon))?;
    Ok(LossParts {
        total,
        recon,
        cos_mean: None,
    })
}

/// `λ_recon·(mse_t + mse_s) − λ_dir·mean_i cos(Δz_i, Δh_i)`.
#[allow(clippy::too_many_arguments)]
pub fn lne_loss<T: Real>(
    tape: &mut Tape<T>,
    x_t: Var,
    x_s: Var,
    rec_t: Var,
    rec_s: Var,
    dz: Var,
    dh: Var,
    w: &LossWeights,
) -> Result<LossParts> {
    let recon = recon_term(tape, x_t, x_s, rec_t, rec_s)?;
    let cos = tape.cosine_similarity(dz, dh, T::from_f64_lossy(w.cos_eps))?;
    let cos_mean = tape.mean(cos)?;
    let total = weighted(tape, recon, cos_mean, w)?;
    Ok(LossParts {
        total,
        recon,
        cos_mean: Some(cos_mean),
    })
}

/// Like [`lne_loss`] with every trajectory compared to one learnable direction `tau: [d]`.
#[allow(clippy::too_many_arguments)]
pub fn lssl_loss<T: Real>(
    tape: &mut Tape<T>,
    x_t: Var,
    x_s: Var,
    rec_t: Var,
    rec_s: Var,
    dz: Var,
    tau: Var,
    w: &LossWeights,
) -> Result<LossParts> {
    let rows = tape.value(dz).shape()[0];
    let tau_rows = tape.broadcast_rows(tau, rows)?;
    let recon = recon_term(tape, x_t, x_s, rec_t, rec_s)?;
    let cos = tape.cosine_similarity(dz, tau_rows, T::from_f64_lossy(w.cos_eps))?;
    let cos_mean = tape.mean(cos)?;
    let total = weighted(tape, recon, cos_mean, w)?;
    Ok(LossParts {
        total,
        recon,
        cos_mean: Some(cos_mean),
    })
}

/// Image pairs of one mini-batch, `[N,1,S,S]` each.
#[derive(Clone, Debug)]
pub struct StepBatch<T> {
    pub x_t: Tensor<T>,
    pub x_s: Tensor<T>,
    pub delta_t: Vec<T>,
}

impl<T: Real> StepBatch<T> {
    pub fn len(&self) -> usize {
        self.delta_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_t.is_empty()
    }
}

/// Everything one forward pass leaves on the tape.
#[derive(Debug)]
pub struct StepOutput<T> {
    pub parts: LossParts,
    /// Mean cos(Δz, Δh) against the neighbourhood direction, whatever the
    /// objective; absent for batches of fewer than two pairs.
    pub cos_dh: Option<Var>,
    pub z_t: Var,
    pub z_s: Var,
    pub dz: Var,
    pub dh: Option<Var>,
    pub graph: Option<NeighborhoodGraph<T>>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Graph (and, when detached, pooled directions) held fixed across
/// evaluations, so finite differences see the same surrogate objective that
/// reverse mode differentiates.
#[derive(Clone, Debug)]
pub struct FrozenTargets<T> {
    pub graph: NeighborhoodGraph<T>,
    pub dh: Tensor<T>,
}

/// Encode `x_t` and `x_s` as one concatenated batch, decode, build the
/// neighbourhood graph on the current `z_t` and assemble the objective.
pub fn step_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    arch: &Architecture,
    batch: &StepBatch<T>,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<StepOutput<T>> {
    step_forward_with(tape, params, bound, arch, batch, cfg, mode, None)
}

/// [`step_forward`] with an optional graph taken from an earlier evaluation.
#[allow(clippy::too_many_arguments)]
pub fn step_forward_with<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    arch: &Architecture,
    batch: &StepBatch<T>,
    cfg: &TrainConfig,
    mode: Mode,
    frozen: Option<&FrozenTargets<T>>,
) -> Result<StepOutput<T>> {
    let n = batch.len();
    if n == 0 || batch.x_t.shape()[0] != n || batch.x_s.shape()[0] != n {
        return Err(LneError::Shape(format!(
            "step batch of {n} intervals with images {:?} / {:?}",
            batch.x_t.shape(),
            batch.x_s.shape()
        )));
    }
    let needs_graph = cfg.method == Method::Lne;
    if n < 2 && needs_graph {
        return Err(LneError::Invalid("LNE needs at least 2 pairs per batch".into()));
    }
    let x_t = tape.constant(batch.x_t.clone())?;
    let x_s = tape.constant(batch.x_s.clone())?;
    let x = tape.concat_rows(&[x_t, x_s])?;
    let mut bn_updates = Vec::new();
    let z = encode_on(tape, params, bound, arch, x, mode, &mut bn_updates)?;
    let rec = decode_on(tape, params, bound, arch, z, mode, &mut bn_updates)?;
    let z_t = tape.slice_rows(z, 0, n)?;
    let z_s = tape.slice_rows(z, n, 2 * n)?;
    let rec_t = tape.slice_rows(rec, 0, n)?;
    let rec_s = tape.slice_rows(rec, n, 2 * n)?;
    let dz = trajectory_vectors_on(tape, z_t, z_s, &batch.delta_t)?;

    let (graph, dh) = if let Some(f) = frozen {
        if f.graph.n != n {
            return Err(LneError::Shape(format!("frozen graph has {} nodes, batch has {n}", f.graph.n)));
        }
        let dh = if cfg.detach_dh {
            tape.constant(f.dh.clone())?
        } else {
            f.graph.pool_on(tape, dz)?
        };
        (Some(f.graph.clone()), Some(dh))
    } else if n >= 2 {
        let graph = NeighborhoodGraph::build(tape.value(z_t), cfg.n_nb)?;
        let source = if cfg.detach_dh { tape.detach(dz)? } else { dz };
        let dh = graph.pool_on(tape, source)?;
        (Some(graph), Some(dh))
    } else {
        (None, None)
    };

    let w = cfg.weights();
    let (parts, cos_dh) = match cfg.method {
        Method::Lne => {
            let parts = lne_loss(tape, x_t, x_s, rec_t, rec_s, dz, dh.expect("n >= 2"), &w)?;
            (parts, parts.cos_mean)
        }
        Method::Ae => {
            let parts = ae_parts(tape, x_t, x_s, rec_t, rec_s, &w)?;
            let cos_dh = match dh {
                Some(dh) => {
                    let c = tape.cosine_similarity(dz, dh, T::from_f64_lossy(w.cos_eps))?;
                    Some(tape.mean(c)?)
                }
                None => None,
            };
            (parts, cos_dh)
        }
        Method::Lssl => {
            let tau = bound.var(LSSL_TAU)?;
            let parts = lssl_loss(tape, x_t, x_s, rec_t, rec_s, dz, tau, &w)?;
            let cos_dh = match dh {
                Some(dh) => {
                    let c = tape.cosine_similarity(dz, dh, T::from_f64_lossy(w.cos_eps))?;
                    Some(tape.mean(c)?)
                }
                None => None,
            };
            (parts, cos_dh)
        }
    };
    Ok(StepOutput {
        parts,
        cos_dh,
        z_t,
        z_s,
        dz,
        dh,
        graph,
        bn_updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(tape: &mut Tape<f64>, rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> Var {
        tape.constant(Tensor::from_fn(vec![rows, cols], f)).unwrap()
    }

    #[test]
    fn zero_direction_weight_equals_reconstruction_only() {
        let w = LossWeights {
            lambda_dir: 0.0,
            ..LossWeights::default()
        };
        let mut tape = Tape::new();
        let x_t = consts(&mut tape, 3, 4, |i| i as f64 * 0.1);
        let x_s = consts(&mut tape, 3, 4, |i| (i as f64).sin());
        let r_t = consts(&mut tape, 3, 4, |i| (i as f64).cos());
        let r_s = consts(&mut tape, 3, 4, |i| 1.0 / (1.0 + i as f64));
        let dz = consts(&mut tape, 3, 2, |i| i as f64 - 2.5);
        let dh = consts(&mut tape, 3, 2, |i| 0.3 * i as f64 - 1.0);
        let lne = lne_loss(&mut tape, x_t, x_s, r_t, r_s, dz, dh, &w).unwrap();
        let ae = ae_loss(&mut tape, x_t, x_s, r_t, r_s, &w).unwrap();
        assert_eq!(tape.value(lne.total).item().to_bits(), tape.value(ae).item().to_bits());
    }

    #[test]
    fn direction_term_bounded() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let x = consts(&mut tape, 2, 3, |_| 0.0);
        let dz = consts(&mut tape, 2, 3, |i| [1.0, 0.0, 0.0, 0.0, 1.0, 0.0][i]);
        let dh = consts(&mut tape, 2, 3, |i| [-1.0, 0.0, 0.0, 0.0, -2.0, 0.0][i]);
        let parts = lne_loss(&mut tape, x, x, x, x, dz, dh, &w).unwrap();
        assert_eq!(tape.value(parts.cos_mean.unwrap()).item(), -1.0);
        assert_eq!(tape.value(parts.total).item(), 1.0);
    }
}
