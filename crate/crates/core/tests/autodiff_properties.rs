#![allow(clippy::type_complexity)]

use lne_core::autodiff::{Tape, Tensor};
use proptest::prelude::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

/// Direct 3×3 zero-padded cross-correlation, one output at a time.
fn conv_naive(x: &[f64], dims: [usize; 4], k: &[f64], bias: &[f64]) -> Vec<f64> {
    let [b, c, h, w] = dims;
    let ko = bias.len();
    let mut out = vec![0.0; b * ko * h * w];
    for n in 0..b {
        for o in 0..ko {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[o];
                    for ch in 0..c {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += k[((o * c + ch) * 3 + dy) * 3 + dx] * x[((n * c + ch) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[((n * ko + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

/// Gradient of `sum(g ⊙ conv(x))` with respect to `x`, scattered directly.
fn conv_input_grad_naive(g: &[f64], dims: [usize; 4], k: &[f64], ko: usize) -> Vec<f64> {
    let [b, c, h, w] = dims;
    let mut gx = vec![0.0; b * c * h * w];
    for n in 0..b {
        for o in 0..ko {
            for y in 0..h {
                for xx in 0..w {
                    let go = g[((n * ko + o) * h + y) * w + xx];
                    for ch in 0..c {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    gx[((n * c + ch) * h + sy as usize) * w + sx as usize] += go * k[((o * c + ch) * 3 + dy) * 3 + dx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv_case() -> impl Strategy<Value = ([usize; 4], usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1..3usize, 1..4usize, 1..6usize, 1..6usize, 1..4usize).prop_flat_map(|(b, c, h, w, ko)| {
        (
            Just([b, c, h, w]),
            Just(ko),
            prop::collection::vec(-1.0..1.0f64, b * c * h * w),
            prop::collection::vec(-1.0..1.0f64, ko * c * 9),
            prop::collection::vec(-1.0..1.0f64, ko),
            prop::collection::vec(-1.0..1.0f64, b * ko * h * w),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_loops((dims, ko, x, k, bias, g) in conv_case()) {
        let mut tape = Tape::<f64>::new();
        let xv = tape.param(Tensor::new(dims.to_vec(), x.clone()).unwrap()).unwrap();
        let kv = tape.param(Tensor::new(vec![ko, dims[1], 3, 3], k.clone()).unwrap()).unwrap();
        let bv = tape.param(Tensor::new(vec![ko], bias.clone()).unwrap()).unwrap();
        let y = tape.conv2d(xv, kv, bv).unwrap();
        prop_assert!(close(tape.value(y).data(), &conv_naive(&x, dims, &k, &bias), 1e-12));

        let gv = tape.constant(Tensor::new(vec![dims[0], ko, dims[2], dims[3]], g.clone()).unwrap()).unwrap();
        let prod = tape.mul(y, gv).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        prop_assert!(close(grads.get(xv).unwrap(), &conv_input_grad_naive(&g, dims, &k, ko), 1e-12));
        // bias gradient: per-channel sum of g
        let hw = dims[2] * dims[3];
        let gb: Vec<f64> = (0..ko)
            .map(|o| (0..dims[0]).map(|n| g[(n * ko + o) * hw..(n * ko + o + 1) * hw].iter().sum::<f64>()).sum())
            .collect();
        prop_assert!(close(grads.get(bv).unwrap(), &gb, 1e-12));
    }

    #[test]
    fn gradients_are_linear_in_the_objective(x in prop::collection::vec(-2.0..2.0f64, 1..20), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let n = x.len();
        let grad = |fa: f64, fb: f64| {
            let mut tape = Tape::<f64>::new();
            let v = tape.param(Tensor::new(vec![n], x.clone()).unwrap()).unwrap();
            let sq = tape.mul(v, v).unwrap();
            let f = tape.sum(sq).unwrap();
            let g = tape.mean(v).unwrap();
            let fs = tape.scale(f, fa).unwrap();
            let gs = tape.scale(g, fb).unwrap();
            let total = tape.add(fs, gs).unwrap();
            tape.backward(total).unwrap().get(v).unwrap().to_vec()
        };
        let expect: Vec<f64> = x.iter().map(|v| a * 2.0 * v + b / n as f64).collect();
        prop_assert!(close(&grad(a, b), &expect, 1e-12));
    }

    #[test]
    fn dense_matches_matrix_product(rows in 1..5usize, n_in in 1..6usize, n_out in 1..5usize, seed in prop::collection::vec(-1.0..1.0f64, 60)) {
        let x: Vec<f64> = (0..rows * n_in).map(|i| seed[i % 60]).collect();
        let w: Vec<f64> = (0..n_out * n_in).map(|i| seed[(i * 7 + 3) % 60]).collect();
        let b: Vec<f64> = (0..n_out).map(|i| seed[(i * 11 + 5) % 60]).collect();
        let mut tape = Tape::<f64>::new();
        let xv = tape.param(Tensor::new(vec![rows, n_in], x.clone()).unwrap()).unwrap();
        let wv = tape.param(Tensor::new(vec![n_out, n_in], w.clone()).unwrap()).unwrap();
        let bv = tape.param(Tensor::new(vec![n_out], b.clone()).unwrap()).unwrap();
        let y = tape.dense(xv, wv, bv).unwrap();
        let expect: Vec<f64> = (0..rows * n_out)
            .map(|idx| {
                let (r, m) = (idx / n_out, idx % n_out);
                b[m] + (0..n_in).map(|j| x[r * n_in + j] * w[m * n_in + j]).sum::<f64>()
            })
            .collect();
        prop_assert!(close(tape.value(y).data(), &expect, 1e-12));
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d sum / dW[m][j] = sum_r x[r][j]
        let gw: Vec<f64> = (0..n_out * n_in).map(|i| (0..rows).map(|r| x[r * n_in + i % n_in]).sum()).collect();
        prop_assert!(close(grads.get(wv).unwrap(), &gw, 1e-12));
    }

    #[test]
    fn batchnorm_standardizes_each_channel(b in 2..5usize, c in 1..4usize, s in 1..6usize, x in prop::collection::vec(-5.0..5.0f64, 120)) {
        let data: Vec<f64> = (0..b * c * s).map(|i| x[i % 120] + 0.01 * i as f64).collect();
        let mut tape = Tape::<f64>::new();
        let xv = tape.param(Tensor::new(vec![b, c, s], data).unwrap()).unwrap();
        let g = tape.param(Tensor::ones(vec![c])).unwrap();
        let beta = tape.param(Tensor::zeros(vec![c])).unwrap();
        let (y, _) = tape.batchnorm_train(xv, g, beta, 1e-5).unwrap();
        let out = tape.value(y).data();
        for ch in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|n| out[(n * c + ch) * s..(n * c + ch + 1) * s].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|q| (q - m).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!(v <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(a in prop::collection::vec(-3.0..3.0f64, 2..8), k in 0.1..10.0f64) {
        let d = a.len();
        let b: Vec<f64> = a.iter().rev().copied().collect();
        let run = |u: &[f64], v: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let uv = tape.constant(Tensor::new(vec![d], u.to_vec()).unwrap()).unwrap();
            let vv = tape.constant(Tensor::new(vec![d], v.to_vec()).unwrap()).unwrap();
            let c = tape.cosine_similarity(uv, vv, 1e-8).unwrap();
            tape.value(c).data()[0]
        };
        let c = run(&a, &b);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
        prop_assert!((run(&scaled, &b) - c).abs() < 1e-9);
        prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        prop_assert!((run(&a, &scaled) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn upsample_and_pool_are_adjoint_to_block_sums() {
    let x: Vec<f64> = (0..16).map(|i| ((i * 5) % 16) as f64 - 7.5).collect();
    let mut tape = Tape::<f64>::new();
    let xv = tape.param(Tensor::new(vec![1, 1, 4, 4], x.clone()).unwrap()).unwrap();
    let p = tape.maxpool2(xv).unwrap();
    let pooled = tape.value(p).data().to_vec();
    for (by, bx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let block = [x[by * 8 + bx * 2], x[by * 8 + bx * 2 + 1], x[by * 8 + 4 + bx * 2], x[by * 8 + 4 + bx * 2 + 1]];
        assert_eq!(pooled[by * 2 + bx], block.iter().copied().fold(f64::MIN, f64::max));
    }
    let u = tape.upsample2(p).unwrap();
    assert_eq!(tape.value(u).shape(), &[1, 1, 4, 4]);
    let w = tape.constant(Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f64)).unwrap();
    let prod = tape.mul(u, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let g = tape.backward(loss).unwrap();
    let gx = g.get(xv).unwrap();
    // each block's weight sum lands on its maximum and nowhere else
    for (by, bx) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
        let idx = [by * 8 + bx * 2, by * 8 + bx * 2 + 1, by * 8 + 4 + bx * 2, by * 8 + 4 + bx * 2 + 1];
        let wsum: f64 = idx.iter().map(|&i| i as f64).sum();
        let winner = *idx.iter().max_by(|&&a, &&b| x[a].partial_cmp(&x[b]).unwrap()).unwrap();
        for &i in &idx {
            assert_eq!(gx[i], if i == winner { wsum } else { 0.0 });
        }
    }
}
