use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{LneError, Result};

use super::kernels::{self, BatchStats, Dims4};
use super::{Real, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        dims: Dims4,
        k_out: usize,
    },
    LeakyRelu {
        input: usize,
        slope: T,
        positive: Vec<bool>,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: usize,
        dims: Dims4,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        dims: (usize, usize, usize),
        train: bool,
    },
    Dense {
        input: usize,
        weight: usize,
        bias: usize,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
    RowCosine {
        a: usize,
        b: usize,
        eps: T,
        cols: usize,
    },
    Mse {
        a: usize,
        b: usize,
    },
    Sum {
        input: usize,
    },
    Mean {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    RowDiv {
        input: usize,
        divisors: Vec<T>,
    },
    Reshape {
        input: usize,
    },
    ConcatRows {
        inputs: Vec<usize>,
    },
    SliceRows {
        input: usize,
        offset: usize,
    },
    MatMulConst {
        input: usize,
        weights: Vec<T>,
        n_out: usize,
        n_in: usize,
        cols: usize,
    },
    BroadcastRows {
        input: usize,
    },
    SoftmaxXent {
        logits: usize,
        probs: Vec<T>,
        targets: Vec<usize>,
        class_weights: Vec<T>,
        total_weight: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2 { .. } => "upsample2",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Dense { .. } => "dense",
            Op::RowCosine { .. } => "cosine_similarity",
            Op::Mse { .. } => "mse",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::RowDiv { .. } => "row_div",
            Op::Reshape { .. } => "reshape",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::MatMulConst { .. } => "matmul_const",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        }
    }
}

/// Branch choices of the piecewise-linear ops (leaky-ReLU signs, max-pool
/// winners) in execution order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Routing {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<usize>>,
}

enum RoutingMode {
    Off,
    Record(Routing),
    Replay { routing: Routing, relu: usize, pool: usize },
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
pub struct Tape<T> {
    id: u64,
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    consumed: bool,
    routing: RoutingMode,
}

fn relu_mask<F: Fn() -> Vec<bool>>(routing: &mut RoutingMode, len: usize, fresh: F) -> Result<Vec<bool>> {
    match routing {
        RoutingMode::Off => Ok(fresh()),
        RoutingMode::Record(r) => {
            let m = fresh();
            r.relu.push(m.clone());
            Ok(m)
        }
        RoutingMode::Replay { routing: r, relu, .. } => {
            let m = r.relu.get(*relu).filter(|m| m.len() == len).cloned();
            *relu += 1;
            m.ok_or_else(|| LneError::Tape("leaky_relu does not match the recorded routing".into()))
        }
    }
}

fn pool_winners<F: Fn() -> Vec<usize>>(routing: &mut RoutingMode, len: usize, fresh: F) -> Result<Vec<usize>> {
    match routing {
        RoutingMode::Off => Ok(fresh()),
        RoutingMode::Record(r) => {
            let w = fresh();
            r.pool.push(w.clone());
            Ok(w)
        }
        RoutingMode::Replay { routing: r, pool, .. } => {
            let w = r.pool.get(*pool).filter(|w| w.len() == len).cloned();
            *pool += 1;
            w.ok_or_else(|| LneError::Tape("maxpool2 does not match the recorded routing".into()))
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<Dims4> {
    match *shape {
        [b, c, h, w] => Ok(Dims4 { b, c, h, w }),
        _ => Err(LneError::Shape(format!("{what} expects a 4-D tensor, got {shape:?}"))),
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(LneError::Shape(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            consumed: false,
            routing: RoutingMode::Off,
        }
    }

    /// Remember the branch taken by every leaky-ReLU and max-pool from now on.
    pub fn record_routing(&mut self) {
        self.routing = RoutingMode::Record(Routing::default());
    }

    /// The branches recorded since [`Tape::record_routing`].
    pub fn take_routing(&mut self) -> Option<Routing> {
        match std::mem::replace(&mut self.routing, RoutingMode::Off) {
            RoutingMode::Record(r) => Some(r),
            _ => None,
        }
    }

    /// Force leaky-ReLUs and max-pools to take the recorded branches, so the
    /// tape evaluates the linear piece active where `routing` was recorded.
    pub fn replay_routing(&mut self, routing: Routing) {
        self.routing = RoutingMode::Replay {
            routing,
            relu: 0,
            pool: 0,
        };
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.values.len() {
            return Err(LneError::Tape("variable does not belong to this tape".into()));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(LneError::NonFinite(op.name().to_string()));
        }
        let idx = self.values.len();
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        Ok(Var { idx, tape: self.id })
    }

    fn req(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.requires[i])
    }

    /// Register an input tensor. Gradients are reported only for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A constant copy of `v`: same value, no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let i = self.index(v)?;
        let value = self.values[i].clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.values[v.idx]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.idx]
    }

    /// 3×3 cross-correlation with zero padding 1 and stride 1, plus a per-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (i, k, b) = (self.index(input)?, self.index(kernel)?, self.index(bias)?);
        let dims = dims4(self.values[i].shape(), "conv2d input")?;
        let (k_out, kc) = match *self.values[k].shape() {
            [ko, kc, 3, 3] => (ko, kc),
            ref s => return Err(LneError::Shape(format!("conv2d kernel must be [K,C,3,3], got {s:?}"))),
        };
        if kc != dims.c {
            return Err(LneError::Shape(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {kc}",
                dims.c
            )));
        }
        if self.values[b].shape() != [k_out] {
            return Err(LneError::Shape(format!(
                "conv2d bias must be [{k_out}], got {:?}",
                self.values[b].shape()
            )));
        }
        if dims.h == 0 || dims.w == 0 {
            return Err(LneError::Shape(format!("conv2d needs non-empty planes, got {}x{}", dims.h, dims.w)));
        }
        let out = kernels::conv3x3_forward(self.values[i].data(), dims, self.values[k].data(), self.values[b].data(), k_out);
        let value = Tensor::new(vec![dims.b, k_out, dims.h, dims.w], out)?;
        let requires = self.req(&[i, k, b]);
        self.push(value, Op::Conv2d { input: i, kernel: k, bias: b, dims, k_out }, requires)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Result<Var> {
        let i = self.index(input)?;
        if !(slope > T::zero() && slope < T::one()) {
            return Err(LneError::Invalid(format!("leaky_relu slope must lie in (0,1), got {slope}")));
        }
        let positive = {
            let x = self.values[i].data();
            relu_mask(&mut self.routing, x.len(), || x.iter().map(|&v| v > T::zero()).collect())?
        };
        let x = &self.values[i];
        let out: Vec<T> = x.data().iter().zip(&positive).map(|(&v, &p)| if p { v } else { v * slope }).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let requires = self.req(&[i]);
        self.push(value, Op::LeakyRelu { input: i, slope, positive }, requires)
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let d = dims4(self.values[i].shape(), "maxpool2")?;
        if d.h % 2 != 0 || d.w % 2 != 0 {
            return Err(LneError::Shape(format!("maxpool2 needs even spatial dims, got {}x{}", d.h, d.w)));
        }
        let (out, argmax) = {
            let x = self.values[i].data();
            let n = d.b * d.c * (d.h / 2) * (d.w / 2);
            let argmax = pool_winners(&mut self.routing, n, || kernels::maxpool2_forward(x, d).1)?;
            (argmax.iter().map(|&a| x[a]).collect::<Vec<T>>(), argmax)
        };
        let value = Tensor::new(vec![d.b, d.c, d.h / 2, d.w / 2], out)?;
        let requires = self.req(&[i]);
        self.push(value, Op::MaxPool2 { input: i, argmax }, requires)
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let d = dims4(self.values[i].shape(), "upsample2")?;
        let out = kernels::upsample2_forward(self.values[i].data(), d);
        let value = Tensor::new(vec![d.b, d.c, d.h * 2, d.w * 2], out)?;
        let requires = self.req(&[i]);
        self.push(value, Op::Upsample2 { input: i, dims: d }, requires)
    }

    fn bn_dims(&self, i: usize, g: usize, b: usize) -> Result<(usize, usize, usize)> {
        let shape = self.values[i].shape();
        if shape.len() < 2 {
            return Err(LneError::Shape(format!("batchnorm needs [B,C,...], got {shape:?}")));
        }
        let (bsz, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if self.values[g].shape() != [c] || self.values[b].shape() != [c] {
            return Err(LneError::Shape(format!("batchnorm gamma/beta must be [{c}]")));
        }
        Ok((bsz, c, s))
    }

    /// Training-mode batch normalization over `[B,C,...]`, normalizing each
    /// channel by its batch statistics. Returns the batch statistics so the
    /// caller can fold them into running averages.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (i, g, b) = (self.index(input)?, self.index(gamma)?, self.index(beta)?);
        let dims = self.bn_dims(i, g, b)?;
        if dims.0 < 2 {
            return Err(LneError::Invalid("batchnorm in train mode needs a batch of at least 2".into()));
        }
        let out = kernels::batchnorm_train_forward(
            self.values[i].data(),
            dims.0,
            dims.1,
            dims.2,
            self.values[g].data(),
            self.values[b].data(),
            eps,
        );
        let value = Tensor::new(self.values[i].shape().to_vec(), out.y)?;
        let requires = self.req(&[i, g, b]);
        let v = self.push(
            value,
            Op::BatchNorm {
                input: i,
                gamma: g,
                beta: b,
                xhat: out.xhat,
                inv_std: out.inv_std,
                dims,
                train: true,
            },
            requires,
        )?;
        Ok((v, out.stats))
    }

    /// Eval-mode batch normalization with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (i, g, b) = (self.index(input)?, self.index(gamma)?, self.index(beta)?);
        let (bsz, c, s) = self.bn_dims(i, g, b)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(LneError::Shape(format!("batchnorm running stats must have {c} entries")));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let x = self.values[i].data();
        let (gd, bd) = (self.values[g].data(), self.values[b].data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for bi in 0..bsz {
            for ch in 0..c {
                for j in (bi * c + ch) * s..(bi * c + ch + 1) * s {
                    xhat[j] = (x[j] - running_mean[ch]) * inv_std[ch];
                    y[j] = gd[ch] * xhat[j] + bd[ch];
                }
            }
        }
        let value = Tensor::new(self.values[i].shape().to_vec(), y)?;
        let requires = self.req(&[i, g, b]);
        self.push(
            value,
            Op::BatchNorm {
                input: i,
                gamma: g,
                beta: b,
                xhat,
                inv_std,
                dims: (bsz, c, s),
                train: false,
            },
            requires,
        )
    }

    /// Affine map `x · Wᵀ + b` with `x: [B,N]`, `W: [M,N]`, `b: [M]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (i, w, b) = (self.index(input)?, self.index(weight)?, self.index(bias)?);
        let (rows, n_in) = match *self.values[i].shape() {
            [r, n] => (r, n),
            ref s => return Err(LneError::Shape(format!("dense input must be [B,N], got {s:?}"))),
        };
        let n_out = match *self.values[w].shape() {
            [m, n] if n == n_in => m,
            ref s => {
                return Err(LneError::Shape(format!(
                    "dense weight {s:?} does not match input width {n_in}"
                )))
            }
        };
        if self.values[b].shape() != [n_out] {
            return Err(LneError::Shape(format!("dense bias must be [{n_out}]")));
        }
        let bias_v = self.values[b].data();
        let mut out: Vec<T> = (0..rows * n_out).map(|j| bias_v[j % n_out]).collect();
        T::gemm(
            rows,
            n_in,
            n_out,
            self.values[i].data(),
            (n_in as isize, 1),
            self.values[w].data(),
            (1, n_in as isize),
            T::one(),
            &mut out,
            (n_out as isize, 1),
        );
        let value = Tensor::new(vec![rows, n_out], out)?;
        let requires = self.req(&[i, w, b]);
        self.push(value, Op::Dense { input: i, weight: w, bias: b, rows, n_in, n_out }, requires)
    }

    /// Row-wise cosine similarity of two `[N,d]` tensors (a 1-D pair is
    /// treated as a single row). Norms are floored at `eps`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        same_shape(self.values[ia].shape(), self.values[ib].shape(), "cosine_similarity")?;
        let shape = self.values[ia].shape();
        let (rows, cols) = match *shape {
            [d] => (1, d),
            [n, d] => (n, d),
            _ => return Err(LneError::Shape(format!("cosine_similarity expects [d] or [N,d], got {shape:?}"))),
        };
        let (av, bv) = (self.values[ia].data(), self.values[ib].data());
        let out: Vec<T> = (0..rows)
            .map(|r| {
                let (x, y) = (&av[r * cols..(r + 1) * cols], &bv[r * cols..(r + 1) * cols]);
                let dot: T = x.iter().zip(y).map(|(p, q)| *p * *q).sum();
                let na = x.iter().map(|p| *p * *p).sum::<T>().sqrt().max(eps);
                let nb = y.iter().map(|q| *q * *q).sum::<T>().sqrt().max(eps);
                dot / (na * nb)
            })
            .collect();
        let value = Tensor::new(vec![rows], out)?;
        let requires = self.req(&[ia, ib]);
        self.push(value, Op::RowCosine { a: ia, b: ib, eps, cols }, requires)
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        same_shape(self.values[ia].shape(), self.values[ib].shape(), "mse")?;
        let (av, bv) = (self.values[ia].data(), self.values[ib].data());
        let n = T::from_usize(av.len()).unwrap();
        let s: T = av.iter().zip(bv).map(|(x, y)| (*x - *y) * (*x - *y)).sum();
        let requires = self.req(&[ia, ib]);
        self.push(Tensor::scalar(s / n), Op::Mse { a: ia, b: ib }, requires)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let s: T = self.values[i].data().iter().copied().sum();
        let requires = self.req(&[i]);
        self.push(Tensor::scalar(s), Op::Sum { input: i }, requires)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let x = self.values[i].data();
        let s: T = x.iter().copied().sum::<T>() / T::from_usize(x.len()).unwrap();
        let requires = self.req(&[i]);
        self.push(Tensor::scalar(s), Op::Mean { input: i }, requires)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        same_shape(self.values[ia].shape(), self.values[ib].shape(), what)?;
        let out: Vec<T> = self.values[ia]
            .data()
            .iter()
            .zip(self.values[ib].data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(self.values[ia].shape().to_vec(), out)?;
        Ok((ia, ib, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, value) = self.binary(a, b, "add", |x, y| x + y)?;
        let requires = self.req(&[ia, ib]);
        self.push(value, Op::Add { a: ia, b: ib }, requires)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, value) = self.binary(a, b, "sub", |x, y| x - y)?;
        let requires = self.req(&[ia, ib]);
        self.push(value, Op::Sub { a: ia, b: ib }, requires)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, value) = self.binary(a, b, "mul", |x, y| x * y)?;
        let requires = self.req(&[ia, ib]);
        self.push(value, Op::Mul { a: ia, b: ib }, requires)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let i = self.index(input)?;
        let x = &self.values[i];
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * factor).collect())?;
        let requires = self.req(&[i]);
        self.push(value, Op::Scale { input: i, factor }, requires)
    }

    /// Divide row `r` of a `[N,...]` tensor by the constant `divisors[r]`.
    pub fn row_div(&mut self, input: Var, divisors: &[T]) -> Result<Var> {
        let i = self.index(input)?;
        let x = &self.values[i];
        let rows = x.shape()[0];
        if divisors.len() != rows {
            return Err(LneError::Shape(format!("row_div: {} divisors for {rows} rows", divisors.len())));
        }
        let stride = x.numel() / rows;
        let out: Vec<T> = x.data().iter().enumerate().map(|(j, &v)| v / divisors[j / stride]).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let requires = self.req(&[i]);
        self.push(value, Op::RowDiv { input: i, divisors: divisors.to_vec() }, requires)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let i = self.index(input)?;
        let value = self.values[i].clone().reshape(shape.to_vec())?;
        let requires = self.req(&[i]);
        self.push(value, Op::Reshape { input: i }, requires)
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(LneError::Shape("concat_rows of nothing".into()));
        }
        let idx: Vec<usize> = inputs.iter().map(|&v| self.index(v)).collect::<Result<_>>()?;
        let tail = self.values[idx[0]].shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let s = self.values[i].shape();
            if s[1..] != tail[..] {
                return Err(LneError::Shape(format!("concat_rows: trailing dims {:?} vs {tail:?}", &s[1..])));
            }
            rows += s[0];
            data.extend_from_slice(self.values[i].data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let requires = self.req(&idx);
        self.push(value, Op::ConcatRows { inputs: idx }, requires)
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let i = self.index(input)?;
        let value = self.values[i].slice_rows(start, end)?;
        let stride = self.values[i].numel() / self.values[i].shape()[0];
        let requires = self.req(&[i]);
        self.push(value, Op::SliceRows { input: i, offset: start * stride }, requires)
    }

    /// `W · X` for a constant `W: [M,N]` and `X: [N,d]`.
    pub fn matmul_const(&mut self, weights: &Tensor<T>, input: Var) -> Result<Var> {
        let i = self.index(input)?;
        let (n_out, n_in) = match *weights.shape() {
            [m, n] => (m, n),
            ref s => return Err(LneError::Shape(format!("matmul_const weights must be 2-D, got {s:?}"))),
        };
        let cols = match *self.values[i].shape() {
            [n, d] if n == n_in => d,
            ref s => return Err(LneError::Shape(format!("matmul_const: input {s:?} does not match weights [{n_out},{n_in}]"))),
        };
        let mut out = vec![T::zero(); n_out * cols];
        T::gemm(
            n_out,
            n_in,
            cols,
            weights.data(),
            (n_in as isize, 1),
            self.values[i].data(),
            (cols as isize, 1),
            T::zero(),
            &mut out,
            (cols as isize, 1),
        );
        let value = Tensor::new(vec![n_out, cols], out)?;
        let requires = self.req(&[i]);
        self.push(
            value,
            Op::MatMulConst { input: i, weights: weights.data().to_vec(), n_out, n_in, cols },
            requires,
        )
    }

    /// Repeat a `[d]` vector as `rows` rows of a `[rows,d]` tensor.
    pub fn broadcast_rows(&mut self, input: Var, rows: usize) -> Result<Var> {
        let i = self.index(input)?;
        let x = &self.values[i];
        if x.shape().len() != 1 {
            return Err(LneError::Shape(format!("broadcast_rows expects [d], got {:?}", x.shape())));
        }
        let d = x.numel();
        let data: Vec<T> = (0..rows).flat_map(|_| x.data().iter().copied()).collect();
        let value = Tensor::new(vec![rows, d], data)?;
        let requires = self.req(&[i]);
        self.push(value, Op::BroadcastRows { input: i }, requires)
    }

    /// Class-weighted mean softmax cross-entropy over rows of `[N,C]` logits:
    /// `Σ_i w[y_i]·(−log p_i[y_i]) / Σ_i w[y_i]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: &[T]) -> Result<Var> {
        let l = self.index(logits)?;
        let (rows, classes) = match *self.values[l].shape() {
            [n, c] => (n, c),
            ref s => return Err(LneError::Shape(format!("cross-entropy logits must be [N,C], got {s:?}"))),
        };
        if targets.len() != rows || class_weights.len() != classes {
            return Err(LneError::Shape("cross-entropy targets/weights do not match logits".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(LneError::Invalid(format!("class index {t} out of range for {classes} classes")));
        }
        let x = self.values[l].data();
        let mut probs = vec![T::zero(); rows * classes];
        let mut loss = T::zero();
        let mut total = T::zero();
        for r in 0..rows {
            let row = &x[r * classes..(r + 1) * classes];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - m).exp() / z;
            }
            let w = class_weights[targets[r]];
            loss += w * (z.ln() + m - row[targets[r]]);
            total += w;
        }
        if total <= T::zero() {
            return Err(LneError::Invalid("cross-entropy total class weight is zero".into()));
        }
        let requires = self.req(&[l]);
        self.push(
            Tensor::scalar(loss / total),
            Op::SoftmaxXent {
                logits: l,
                probs,
                targets: targets.to_vec(),
                class_weights: class_weights.to_vec(),
                total_weight: total,
            },
            requires,
        )
    }

    /// Reverse-mode sweep from a scalar. The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let root = self.index(loss)?;
        if self.consumed {
            return Err(LneError::Tape("backward already ran on this tape; rerun the forward pass".into()));
        }
        if !self.values[root].is_scalar() {
            return Err(LneError::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[root].shape()
            )));
        }
        self.consumed = true;
        let n = self.values.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.requires[root] {
            grads[root] = Some(vec![T::one()]);
        }
        for node in (0..=root).rev() {
            let Some(g) = grads[node].take() else { continue };
            if !self.requires[node] {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            if matches!(self.ops[node], Op::Leaf) {
                grads[node] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.ops[i], g) {
                (Op::Leaf, Some(g)) if self.requires[i] => Some(g),
                _ => None,
            })
            .collect();
        let shapes = self.values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(Gradients { tape: self.id, grads, shapes })
    }

    fn backprop_node(&self, node: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let values = &self.values;
        let requires = &self.requires;
        let mut acc = |idx: usize, f: &mut dyn FnMut(&mut [T])| {
            if !requires[idx] {
                return;
            }
            let slot = grads[idx].get_or_insert_with(|| vec![T::zero(); values[idx].numel()]);
            f(slot);
        };
        match &self.ops[node] {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, dims, k_out } => {
                let cg = kernels::conv3x3_backward(
                    values[*input].data(),
                    *dims,
                    values[*kernel].data(),
                    *k_out,
                    g,
                    requires[*input],
                );
                acc(*input, &mut |s| add_into(s, &cg.input));
                acc(*kernel, &mut |s| add_into(s, &cg.kernel));
                acc(*bias, &mut |s| add_into(s, &cg.bias));
            }
            Op::LeakyRelu { input, slope, positive } => {
                acc(*input, &mut |s| {
                    for ((d, &p), &gi) in s.iter_mut().zip(positive).zip(g) {
                        *d += if p { gi } else { gi * *slope };
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => acc(*input, &mut |s| {
                for (&a, &gi) in argmax.iter().zip(g) {
                    s[a] += gi;
                }
            }),
            Op::Upsample2 { input, dims } => {
                let gi = kernels::upsample2_backward(g, *dims);
                acc(*input, &mut |s| add_into(s, &gi));
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, dims, train } => {
                let (dx, dgamma, dbeta) = kernels::batchnorm_backward(
                    g,
                    xhat,
                    inv_std,
                    values[*gamma].data(),
                    dims.0,
                    dims.1,
                    dims.2,
                    *train,
                );
                acc(*input, &mut |s| add_into(s, &dx));
                acc(*gamma, &mut |s| add_into(s, &dgamma));
                acc(*beta, &mut |s| add_into(s, &dbeta));
            }
            Op::Dense { input, weight, bias, rows, n_in, n_out } => {
                let (rows, n_in, n_out) = (*rows, *n_in, *n_out);
                acc(*input, &mut |s| {
                    T::gemm(rows, n_out, n_in, g, (n_out as isize, 1), values[*weight].data(), (n_in as isize, 1), T::one(), s, (n_in as isize, 1));
                });
                acc(*weight, &mut |s| {
                    T::gemm(n_out, rows, n_in, g, (1, n_out as isize), values[*input].data(), (n_in as isize, 1), T::one(), s, (n_in as isize, 1));
                });
                acc(*bias, &mut |s| {
                    for r in 0..rows {
                        add_into(s, &g[r * n_out..(r + 1) * n_out]);
                    }
                });
            }
            Op::RowCosine { a, b, eps, cols } => {
                let (av, bv) = (values[*a].data(), values[*b].data());
                let cols = *cols;
                let rows = av.len() / cols;
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for r in 0..rows {
                    let (x, y) = (&av[r * cols..(r + 1) * cols], &bv[r * cols..(r + 1) * cols]);
                    let dot: T = x.iter().zip(y).map(|(p, q)| *p * *q).sum();
                    let la = x.iter().map(|p| *p * *p).sum::<T>().sqrt();
                    let lb = y.iter().map(|q| *q * *q).sum::<T>().sqrt();
                    let (na, nb) = (la.max(*eps), lb.max(*eps));
                    let inv = T::one() / (na * nb);
                    // the norm only contributes a gradient where it is not clamped
                    let ca = if la > *eps { dot * inv / (na * na) } else { T::zero() };
                    let cb = if lb > *eps { dot * inv / (nb * nb) } else { T::zero() };
                    for j in 0..cols {
                        da[r * cols + j] = g[r] * (y[j] * inv - ca * x[j]);
                        db[r * cols + j] = g[r] * (x[j] * inv - cb * y[j]);
                    }
                }
                acc(*a, &mut |s| add_into(s, &da));
                acc(*b, &mut |s| add_into(s, &db));
            }
            Op::Mse { a, b } => {
                let (av, bv) = (values[*a].data(), values[*b].data());
                let c = g[0] * T::from_f64(2.0).unwrap() / T::from_usize(av.len()).unwrap();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += c * (av[j] - bv[j]);
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] -= c * (av[j] - bv[j]);
                    }
                });
            }
            Op::Sum { input } => acc(*input, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean { input } => {
                let c = g[0] / T::from_usize(values[*input].numel()).unwrap();
                acc(*input, &mut |s| s.iter_mut().for_each(|d| *d += c));
            }
            Op::Add { a, b } => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, gi)| *d -= *gi));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (values[*a].data(), values[*b].data());
                acc(*a, &mut |s| (0..s.len()).for_each(|j| s[j] += g[j] * bv[j]));
                acc(*b, &mut |s| (0..s.len()).for_each(|j| s[j] += g[j] * av[j]));
            }
            Op::Scale { input, factor } => {
                acc(*input, &mut |s| s.iter_mut().zip(g).for_each(|(d, gi)| *d += *gi * *factor));
            }
            Op::RowDiv { input, divisors } => {
                let stride = g.len() / divisors.len();
                acc(*input, &mut |s| {
                    for (j, d) in s.iter_mut().enumerate() {
                        *d += g[j] / divisors[j / stride];
                    }
                });
            }
            Op::Reshape { input } => acc(*input, &mut |s| add_into(s, g)),
            Op::ConcatRows { inputs } => {
                let mut off = 0;
                for &i in inputs {
                    let n = values[i].numel();
                    acc(i, &mut |s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceRows { input, offset } => {
                let off = *offset;
                acc(*input, &mut |s| add_into(&mut s[off..off + g.len()], g));
            }
            Op::MatMulConst { input, weights, n_out, n_in, cols } => {
                acc(*input, &mut |s| {
                    T::gemm(*n_in, *n_out, *cols, weights, (1, *n_in as isize), g, (*cols as isize, 1), T::one(), s, (*cols as isize, 1));
                });
            }
            Op::BroadcastRows { input } => {
                let d = values[*input].numel();
                acc(*input, &mut |s| {
                    for row in g.chunks(d) {
                        add_into(s, row);
                    }
                });
            }
            Op::SoftmaxXent { logits, probs, targets, class_weights, total_weight } => {
                let classes = class_weights.len();
                acc(*logits, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        let w = g[0] * class_weights[t] / *total_weight;
                        for c in 0..classes {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            s[r * classes + c] += w * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

/// Gradients of a scalar with respect to the leaves of one tape.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a `requires_grad` leaf; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the leaf did not influence the loss.
    pub fn tensor(&self, v: Var) -> Result<Tensor<T>> {
        if v.tape != self.tape || v.idx >= self.shapes.len() {
            return Err(LneError::Tape("variable does not belong to this tape".into()));
        }
        let shape = self.shapes[v.idx].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()),
            None => Ok(Tensor::zeros(shape)),
        }
    }
}
