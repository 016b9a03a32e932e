#![allow(clippy::needless_range_loop, clippy::type_complexity)]

use lne_core::autodiff::Tensor;
use lne_core::graph::{
    adjacency, build_graph, knn_neighbors, pairwise_distances, pool_embedding, LatentBatch, NeighborhoodGraph,
};
use proptest::prelude::*;

/// Brute-force reference: neighbour lists, adjacency rows and pooled vectors
/// straight from the definitions, one node at a time.
fn oracle(z: &[Vec<f64>], dz: &[Vec<f64>], k: usize) -> (Vec<Vec<usize>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = z.len();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut nbs = Vec::new();
    let mut rows = Vec::new();
    let mut pooled = Vec::new();
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(&z[i], &z[j]), j)).collect();
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        cand.truncate(k.min(n - 1));
        let hi = cand.iter().map(|c| c.0).fold(f64::MIN, f64::max);
        let lo = cand.iter().map(|c| c.0).fold(f64::MAX, f64::min);
        let sigma = hi - lo;
        let mut row = vec![0.0; n];
        for &(d, j) in &cand {
            row[j] = if sigma < 1e-12 { 1.0 } else { (-d * d / (2.0 * sigma * sigma)).exp() };
        }
        // normalized weight as a ratio of exponentials, finite even when every A_ij underflows
        let mut h = vec![0.0; dz[0].len()];
        for &(dj, j) in &cand {
            let w = if sigma < 1e-12 {
                1.0 / cand.len() as f64
            } else {
                1.0 / cand.iter().map(|&(dl, _)| ((dj * dj - dl * dl) / (2.0 * sigma * sigma)).exp()).sum::<f64>()
            };
            for (hk, dk) in h.iter_mut().zip(&dz[j]) {
                *hk += w * dk;
            }
        }
        nbs.push(cand.iter().map(|c| c.1).collect());
        rows.push(row);
        pooled.push(h);
    }
    (nbs, rows, pooled)
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn rows_of(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
}

fn pooled(z: &[Vec<f64>], dz: &[Vec<f64>], k: usize) -> (NeighborhoodGraph<f64>, Vec<Vec<f64>>) {
    let g = NeighborhoodGraph::build(&tensor(z), k).unwrap();
    let h = rows_of(&g.pool(&tensor(dz)).unwrap());
    (g, h)
}

fn close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) -> bool {
    a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

#[test]
fn worked_example_on_a_line() {
    let z = vec![vec![0.0], vec![1.0], vec![3.0]];
    let dz = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    let p = pairwise_distances(&tensor(&z)).unwrap();
    assert_eq!(knn_neighbors(&p, 3, 1).unwrap(), vec![vec![1], vec![0], vec![1]]);

    let nb = knn_neighbors(&p, 3, 2).unwrap();
    let (a, sigma) = adjacency(&p, 3, &nb).unwrap();
    assert_eq!(sigma[0], 2.0);
    assert!((a[1] - 0.8824969025845955).abs() < 1e-6);
    assert!((a[2] - 0.32465246735834974).abs() < 1e-6);

    let h = rows_of(&pool_embedding(&a, &tensor(&dz)).unwrap());
    // exp(-1/8) / (exp(-1/8) + exp(-9/8)) is the logistic function at 1
    assert!((h[0][0] - 0.7310585786300049).abs() < 1e-6);
    assert!((h[0][1] - 0.2689414213699951).abs() < 1e-6);

    let (_, rows, reference) = oracle(&z, &dz, 2);
    assert!(close(&h, &reference, 1e-12));
    assert!(a.chunks(3).zip(&rows).all(|(x, y)| close(&[x.to_vec()], std::slice::from_ref(y), 1e-12)));
}

#[test]
fn equal_distances_average_uniformly() {
    // node 0 at the centre of a square: all four neighbours at distance 1
    let z = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
    let dz = vec![vec![9.0], vec![1.0], vec![2.0], vec![3.0], vec![6.0]];
    let (g, h) = pooled(&z, &dz, 4);
    assert_eq!(g.sigma[0], 0.0);
    assert!((h[0][0] - 3.0).abs() < 1e-12);
}

#[test]
fn two_nodes_exchange_trajectories() {
    let batch = LatentBatch::new(
        tensor(&[vec![0.0, 0.0], vec![1.0, 2.0]]),
        tensor(&[vec![2.0, 4.0], vec![1.0, 0.0]]),
        vec![2.0, 1.0],
    )
    .unwrap();
    let (_, dh) = build_graph(&batch, 1).unwrap();
    assert_eq!(dh.data(), &[0.0, -2.0, 1.0, 2.0]);
}

fn cloud(n: std::ops::Range<usize>, d: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>, usize)> {
    (n, d).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), n),
            prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 3), n),
            1..n,
        )
    })
}

fn orthogonal(seed: &[f64], d: usize) -> Vec<Vec<f64>> {
    // Gram-Schmidt on a seed matrix
    let mut q: Vec<Vec<f64>> = Vec::new();
    for r in 0..d {
        let mut v: Vec<f64> = (0..d).map(|c| seed[r * d + c]).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.iter().map(|a| a / norm).collect());
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matches_brute_force((z, dz, k) in cloud(2..12, 1..6)) {
        let (g, h) = pooled(&z, &dz, k);
        let (nbs, rows, reference) = oracle(&z, &dz, k);
        prop_assert_eq!(&g.neighbors, &nbs);
        let a: Vec<Vec<f64>> = g.a.chunks(z.len()).map(|r| r.to_vec()).collect();
        prop_assert!(close(&a, &rows, 1e-12));
        prop_assert!(close(&h, &reference, 1e-10));
    }

    #[test]
    fn rows_are_convex_combinations((z, dz, k) in cloud(2..12, 1..6)) {
        let (g, h) = pooled(&z, &dz, k);
        let n = z.len();
        for i in 0..n {
            let row = &g.w[i * n..(i + 1) * n];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            for j in 0..n {
                let a = g.a[i * n + j];
                if g.neighbors[i].contains(&j) {
                    let exponent = -g.p[i * n + j].powi(2) / (2.0 * g.sigma[i].powi(2));
                    prop_assert!(a <= 1.0 && (a > 0.0 || exponent < -700.0));
                } else {
                    prop_assert!(a == 0.0 && row[j] == 0.0);
                }
            }
            for c in 0..3 {
                let vals = g.neighbors[i].iter().map(|&j| dz[j][c]);
                let lo = vals.clone().fold(f64::MAX, f64::min);
                let hi = vals.fold(f64::MIN, f64::max);
                prop_assert!(h[i][c] >= lo - 1e-12 && h[i][c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn translation_invariance((z, dz, k) in cloud(3..12, 1..6), shift in prop::collection::vec(-50.0..50.0f64, 6)) {
        let moved: Vec<Vec<f64>> = z.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let (g0, h0) = pooled(&z, &dz, k);
        let (g1, h1) = pooled(&moved, &dz, k);
        prop_assume!(g0.neighbors == g1.neighbors);
        prop_assert!(close(std::slice::from_ref(&g0.w), std::slice::from_ref(&g1.w), 1e-8));
        prop_assert!(close(&h0, &h1, 1e-8));
    }

    #[test]
    fn rotation_invariance((z, dz, k) in cloud(3..12, 2..6), seed in prop::collection::vec(-1.0..1.0f64, 25)) {
        let d = z[0].len();
        let q = orthogonal(&seed, d);
        prop_assume!(q.iter().flatten().all(|v| v.is_finite()));
        let turned: Vec<Vec<f64>> = z
            .iter()
            .map(|r| q.iter().map(|qr| qr.iter().zip(r).map(|(a, b)| a * b).sum()).collect())
            .collect();
        let (g0, h0) = pooled(&z, &dz, k);
        let (g1, h1) = pooled(&turned, &dz, k);
        prop_assume!(g0.neighbors == g1.neighbors);
        prop_assert!(close(std::slice::from_ref(&g0.w), std::slice::from_ref(&g1.w), 1e-8));
        prop_assert!(close(&h0, &h1, 1e-8));
    }

    #[test]
    fn scale_invariance((z, dz, k) in cloud(3..12, 1..6), c in 0.01..100.0f64) {
        let scaled: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let (g0, h0) = pooled(&z, &dz, k);
        let (g1, h1) = pooled(&scaled, &dz, k);
        prop_assume!(g0.neighbors == g1.neighbors);
        prop_assert!(close(std::slice::from_ref(&g0.a), std::slice::from_ref(&g1.a), 1e-8));
        prop_assert!(close(&h0, &h1, 1e-8));
    }

    #[test]
    fn permutation_equivariance((z, dz, k) in cloud(3..12, 1..6), key in prop::collection::vec(any::<u32>(), 12)) {
        let n = z.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| (key[i], i));
        let pz: Vec<Vec<f64>> = perm.iter().map(|&i| z[i].clone()).collect();
        let pdz: Vec<Vec<f64>> = perm.iter().map(|&i| dz[i].clone()).collect();
        let (_, h0) = pooled(&z, &dz, k);
        let (_, h1) = pooled(&pz, &pdz, k);
        let expect: Vec<Vec<f64>> = perm.iter().map(|&i| h0[i].clone()).collect();
        prop_assert!(close(&h1, &expect, 1e-10));
    }
}
