//! Numeric kernels behind the tape operations. Each works on flat row-major
//! slices with explicit dimensions. Batch items are processed in parallel;
//! cross-batch reductions are summed afterwards in batch order.

use crate::par;

use super::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn item(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Expand one `[C,H,W]` image into the `[C*9, H*W]` patch matrix of a 3×3
/// zero-padded convolution.
fn im2col3<T: Real>(img: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                let x_lo = if kx == 0 { 1 } else { 0 };
                let x_hi = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    if x_lo > 0 {
                        out[0] = T::zero();
                    }
                    if x_hi < w {
                        out[w - 1] = T::zero();
                    }
                    let shift = kx as isize - 1;
                    for x in x_lo..x_hi {
                        out[x] = src[(x as isize + shift) as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add a `[C*9, H*W]` patch-gradient matrix back onto a `[C,H,W]` image gradient.
fn col2im3<T: Real>(col: &[T], c: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                let x_lo = if kx == 0 { 1 } else { 0 };
                let x_hi = if kx == 2 { w - 1 } else { w };
                let shift = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in x_lo..x_hi {
                        dst[(x as isize + shift) as usize] += src[x];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3x3_forward<T: Real>(
    input: &[T],
    d: Dims4,
    kernel: &[T],
    bias: &[T],
    k_out: usize,
) -> Vec<T> {
    let hw = d.plane();
    let ck = d.c * 9;
    let mut out = vec![T::zero(); d.b * k_out * hw];
    par::for_each_chunk_mut(&mut out, k_out * hw, |bi, out_b| {
        let mut col = vec![T::zero(); ck * hw];
        im2col3(&input[bi * d.item()..(bi + 1) * d.item()], d.c, d.h, d.w, &mut col);
        for (k, plane) in out_b.chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias[k]);
        }
        T::gemm(k_out, ck, hw, kernel, (ck as isize, 1), &col, (hw as isize, 1), T::one(), out_b, (hw as isize, 1));
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Vec<T>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv3x3_backward<T: Real>(
    input: &[T],
    d: Dims4,
    kernel: &[T],
    k_out: usize,
    grad_out: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let hw = d.plane();
    let ck = d.c * 9;
    let per_item = par::map_range(d.b, |bi| {
        let g = &grad_out[bi * k_out * hw..(bi + 1) * k_out * hw];
        let mut col = vec![T::zero(); ck * hw];
        im2col3(&input[bi * d.item()..(bi + 1) * d.item()], d.c, d.h, d.w, &mut col);
        // dK_b = g [K,HW] · colᵀ [HW,CK]
        let mut dk = vec![T::zero(); k_out * ck];
        T::gemm(k_out, hw, ck, g, (hw as isize, 1), &col, (1, hw as isize), T::zero(), &mut dk, (ck as isize, 1));
        let db: Vec<T> = g.chunks(hw).map(|p| p.iter().copied().sum()).collect();
        let din = if need_input {
            // dcol = Kᵀ [CK,K] · g [K,HW]
            T::gemm(ck, k_out, hw, kernel, (1, ck as isize), g, (hw as isize, 1), T::zero(), &mut col, (hw as isize, 1));
            let mut din = vec![T::zero(); d.item()];
            col2im3(&col, d.c, d.h, d.w, &mut din);
            din
        } else {
            Vec::new()
        };
        (dk, db, din)
    });
    let mut grads = ConvGrads {
        input: if need_input { Vec::with_capacity(input.len()) } else { Vec::new() },
        kernel: vec![T::zero(); k_out * ck],
        bias: vec![T::zero(); k_out],
    };
    for (dk, db, din) in per_item {
        grads.kernel.iter_mut().zip(&dk).for_each(|(a, b)| *a += *b);
        grads.bias.iter_mut().zip(&db).for_each(|(a, b)| *a += *b);
        grads.input.extend_from_slice(&din);
    }
    grads
}

/// 2×2 max pooling. Returns the pooled values and, per output, the flat
/// input index that won (first in row-major order on ties).
pub(crate) fn maxpool2_forward<T: Real>(input: &[T], d: Dims4) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (d.h / 2, d.w / 2);
    let mut out = Vec::with_capacity(d.b * d.c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..d.b * d.c {
        let base = plane * d.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * d.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * d.w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward<T: Real>(input: &[T], d: Dims4) -> Vec<T> {
    let (oh, ow) = (d.h * 2, d.w * 2);
    let mut out = Vec::with_capacity(d.b * d.c * oh * ow);
    for plane in input.chunks(d.plane()) {
        for y in 0..oh {
            let row = &plane[(y / 2) * d.w..(y / 2 + 1) * d.w];
            for x in 0..ow {
                out.push(row[x / 2]);
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(grad_out: &[T], d: Dims4) -> Vec<T> {
    let ow = d.w * 2;
    let mut g = vec![T::zero(); d.b * d.c * d.plane()];
    for (p, plane) in g.chunks_mut(d.plane()).enumerate() {
        let src = &grad_out[p * 4 * d.plane()..(p + 1) * 4 * d.plane()];
        for y in 0..d.h {
            for x in 0..d.w {
                let r0 = 2 * y * ow + 2 * x;
                let r1 = r0 + ow;
                plane[y * d.w + x] = (src[r0] + src[r0 + 1]) + (src[r1] + src[r1 + 1]);
            }
        }
    }
    g
}

/// Per-channel statistics of one training-mode batchnorm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n−1) variance, the quantity folded into running statistics.
    pub var_unbiased: Vec<T>,
}

pub(crate) struct BatchNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub stats: BatchStats<T>,
}

/// `input` viewed as `[B, C, S]`.
pub(crate) fn batchnorm_train_forward<T: Real>(
    input: &[T],
    b: usize,
    c: usize,
    s: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> BatchNormOut<T> {
    let n = T::from_usize(b * s).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for bi in 0..b {
            acc += input[(bi * c + ch) * s..(bi * c + ch + 1) * s].iter().copied().sum::<T>();
        }
        let m = acc / n;
        let mut sq = T::zero();
        for bi in 0..b {
            for &v in &input[(bi * c + ch) * s..(bi * c + ch + 1) * s] {
                sq += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = sq / n;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); input.len()];
    let mut y = vec![T::zero(); input.len()];
    for bi in 0..b {
        for ch in 0..c {
            let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
            for i in r {
                let xh = (input[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let unbias = n / (n - T::one());
    BatchNormOut {
        y,
        xhat,
        inv_std,
        stats: BatchStats {
            mean,
            var_unbiased: var.iter().map(|&v| v * unbias).collect(),
        },
    }
}

/// Gradients of `y = gamma * xhat + beta`. With `through_stats` the input
/// gradient includes the dependence of the batch mean/variance on the input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Real>(
    grad_out: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    b: usize,
    c: usize,
    s: usize,
    through_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::from_usize(b * s).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            for i in (bi * c + ch) * s..(bi * c + ch + 1) * s {
                dgamma[ch] += grad_out[i] * xhat[i];
                dbeta[ch] += grad_out[i];
            }
        }
    }
    let mut dx = vec![T::zero(); grad_out.len()];
    for bi in 0..b {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            for i in (bi * c + ch) * s..(bi * c + ch + 1) * s {
                dx[i] = if through_stats {
                    // Σdxhat = gamma·dbeta, Σdxhat·xhat = gamma·dgamma
                    scale * (grad_out[i] - (dbeta[ch] + xhat[i] * dgamma[ch]) / n)
                } else {
                    scale * grad_out[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
