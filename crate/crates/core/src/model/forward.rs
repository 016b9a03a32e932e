use crate::autodiff::{BatchStats, Real, Tape, Tensor, Var};
use crate::error::{LneError, Result};

use super::{Architecture, Bound, ModelParams};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, gradients through them.
    Train,
    /// Running statistics.
    Eval,
}

/// Batch statistics of one batchnorm layer, to be folded into its running averages.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub prefix: String,
    pub stats: BatchStats<T>,
}

fn t<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

#[allow(clippy::too_many_arguments)]
fn conv_bn_act<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    x: Var,
    prefix: &str,
    mode: Mode,
    slope: f64,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<Var> {
    let y = tape.conv2d(
        x,
        bound.var(&format!("{prefix}.conv.weight"))?,
        bound.var(&format!("{prefix}.conv.bias"))?,
    )?;
    let gamma = bound.var(&format!("{prefix}.bn.gamma"))?;
    let beta = bound.var(&format!("{prefix}.bn.beta"))?;
    let y = match mode {
        Mode::Train => {
            let (y, stats) = tape.batchnorm_train(y, gamma, beta, t(BN_EPS))?;
            updates.push(BnUpdate {
                prefix: format!("{prefix}.bn"),
                stats,
            });
            y
        }
        Mode::Eval => {
            let mean = params.get(&format!("{prefix}.bn.running_mean"))?.data();
            let var = params.get(&format!("{prefix}.bn.running_var"))?.data();
            tape.batchnorm_eval(y, gamma, beta, mean, var, t(BN_EPS))?
        }
    };
    tape.leaky_relu(y, t(slope))
}

/// Encoder `F`: images `[B,1,S,S]` → latents `[B, latent_dim]`.
pub fn encode_on<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    arch: &Architecture,
    images: Var,
    mode: Mode,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<Var> {
    let shape = tape.value(images).shape().to_vec();
    let s = arch.input_size;
    if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
        return Err(LneError::Shape(format!("encoder expects [B,1,{s},{s}], got {shape:?}")));
    }
    let mut x = images;
    for i in 0..arch.encoder_channels.len() {
        x = conv_bn_act(tape, params, bound, x, &format!("enc{i}"), mode, arch.slope, updates)?;
        x = tape.maxpool2(x)?;
    }
    tape.reshape(x, &[shape[0], arch.latent_dim()])
}

/// Decoder `H`: latents `[B, latent_dim]` → reconstructions `[B,1,S,S]`.
pub fn decode_on<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    arch: &Architecture,
    z: Var,
    mode: Mode,
    updates: &mut Vec<BnUpdate<T>>,
) -> Result<Var> {
    let shape = tape.value(z).shape().to_vec();
    if shape.len() != 2 || shape[1] != arch.latent_dim() {
        return Err(LneError::Shape(format!(
            "decoder expects [B,{}], got {shape:?}",
            arch.latent_dim()
        )));
    }
    let side = arch.latent_side();
    let mut x = tape.reshape(z, &[shape[0], arch.latent_channels(), side, side])?;
    for i in 0..arch.decoder_channels.len() {
        x = conv_bn_act(tape, params, bound, x, &format!("dec{i}"), mode, arch.slope, updates)?;
        x = tape.upsample2(x)?;
    }
    tape.conv2d(x, bound.var("out.conv.weight")?, bound.var("out.conv.bias")?)
}

/// Fold batch statistics into running averages with momentum [`BN_MOMENTUM`].
pub fn apply_bn_updates<T: Real>(params: &mut ModelParams<T>, updates: &[BnUpdate<T>]) -> Result<()> {
    let m: T = t(BN_MOMENTUM);
    for u in updates {
        let mean = params.get_mut(&format!("{}.running_mean", u.prefix))?;
        for (r, b) in mean.data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (T::one() - m) * *r + m * *b;
        }
        let var = params.get_mut(&format!("{}.running_var", u.prefix))?;
        for (r, b) in var.data_mut().iter_mut().zip(&u.stats.var_unbiased) {
            *r = (T::one() - m) * *r + m * *b;
        }
    }
    Ok(())
}

const EVAL_CHUNK: usize = 256;

fn eval_chunks<T: Real>(
    input: &Tensor<T>,
    f: impl Fn(&mut Tape<T>, &Bound, Var) -> Result<Var>,
    params: &ModelParams<T>,
) -> Result<Tensor<T>> {
    let rows = input.shape()[0];
    let mut out_shape = None;
    let mut data = Vec::new();
    let mut start = 0;
    while start < rows {
        let end = (start + EVAL_CHUNK).min(rows);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false)?;
        let x = tape.constant(input.slice_rows(start, end)?)?;
        let y = f(&mut tape, &bound, x)?;
        let v = tape.value(y);
        out_shape.get_or_insert_with(|| v.shape().to_vec());
        data.extend_from_slice(v.data());
        start = end;
    }
    let mut shape = out_shape.ok_or_else(|| LneError::Shape("empty batch".into()))?;
    shape[0] = rows;
    Tensor::new(shape, data)
}

/// Eval-mode encoding without gradients.
pub fn encode<T: Real>(params: &ModelParams<T>, arch: &Architecture, images: &Tensor<T>) -> Result<Tensor<T>> {
    eval_chunks(
        images,
        |tape, bound, x| encode_on(tape, params, bound, arch, x, Mode::Eval, &mut Vec::new()),
        params,
    )
}

/// Eval-mode decoding without gradients.
pub fn decode<T: Real>(params: &ModelParams<T>, arch: &Architecture, z: &Tensor<T>) -> Result<Tensor<T>> {
    eval_chunks(
        z,
        |tape, bound, x| decode_on(tape, params, bound, arch, x, Mode::Eval, &mut Vec::new()),
        params,
    )
}
