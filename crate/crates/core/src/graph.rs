//! Per-batch latent geometry.
//!
//! Each pair `i` contributes a node positioned at its start latent `z_t[i]`
//! carrying the trajectory vector `dz[i] = (z_s[i] − z_t[i]) / Δt[i]`. Node
//! `i` links to its `n_nb` nearest other nodes with Gaussian weights
//! `A[i,j] = exp(−P[i,j]² / 2σ_i²)`, where the bandwidth `σ_i` is the spread
//! (max − min) of those neighbour distances. The pooled embedding is the
//! out-degree normalized average `dh[i] = Σ_j (A[i,j] / D[i]) dz[j]`, i.e. a
//! random-walk normalization: the weights of each row are nonnegative and sum
//! to one, so `dh[i]` lies in the convex hull of its neighbours' vectors.
//!
//! Topology and weights are constants of an iteration; only the `dz` values
//! they pool can carry gradients (through [`Tape::matmul_const`]).

use std::io::Write;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{LneError, Result};

/// Bandwidths below this are treated as zero: all neighbours get weight 1.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Per-row metadata carried alongside a latent batch for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub subject: String,
    pub age_t: f64,
    pub label: Option<String>,
}

/// Latent start/end points of `N` pairs.
#[derive(Clone, Debug)]
pub struct LatentBatch<T> {
    pub z_t: Tensor<T>,
    pub z_s: Tensor<T>,
    pub delta_t: Vec<T>,
    pub provenance: Vec<Provenance>,
}

impl<T: Real> LatentBatch<T> {
    pub fn new(z_t: Tensor<T>, z_s: Tensor<T>, delta_t: Vec<T>) -> Result<Self> {
        if z_t.shape() != z_s.shape() || z_t.shape().len() != 2 {
            return Err(LneError::Shape(format!(
                "latent batch needs matching [N,d] tensors, got {:?} and {:?}",
                z_t.shape(),
                z_s.shape()
            )));
        }
        if delta_t.len() != z_t.shape()[0] {
            return Err(LneError::Shape("one Δt per pair required".into()));
        }
        Ok(LatentBatch {
            z_t,
            z_s,
            delta_t,
            provenance: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.delta_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_t.is_empty()
    }
}

fn check_delta_t<T: Real>(delta_t: &[T]) -> Result<()> {
    if let Some((i, dt)) = delta_t.iter().enumerate().find(|(_, dt)| !(**dt > T::zero())) {
        return Err(LneError::Invalid(format!("pair {i} has non-positive Δt {dt}")));
    }
    Ok(())
}

fn rows_cols<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        ref s => Err(LneError::Shape(format!("{what} must be [N,d], got {s:?}"))),
    }
}

/// `(z_s − z_t) / Δt` row by row.
pub fn trajectory_vectors<T: Real>(z_t: &Tensor<T>, z_s: &Tensor<T>, delta_t: &[T]) -> Result<Tensor<T>> {
    check_delta_t(delta_t)?;
    let (n, d) = rows_cols(z_t, "z_t")?;
    if z_s.shape() != z_t.shape() || delta_t.len() != n {
        return Err(LneError::Shape("z_t, z_s and Δt disagree on batch shape".into()));
    }
    let data = (0..n * d)
        .map(|k| (z_s.data()[k] - z_t.data()[k]) / delta_t[k / d])
        .collect();
    Tensor::new(vec![n, d], data)
}

/// Differentiable [`trajectory_vectors`] on a tape.
pub fn trajectory_vectors_on<T: Real>(tape: &mut Tape<T>, z_t: Var, z_s: Var, delta_t: &[T]) -> Result<Var> {
    check_delta_t(delta_t)?;
    let diff = tape.sub(z_s, z_t)?;
    tape.row_div(diff, delta_t)
}

/// Symmetric `[N,N]` matrix of Euclidean distances between rows of `z_t`.
pub fn pairwise_distances<T: Real>(z_t: &Tensor<T>) -> Result<Vec<T>> {
    let (n, d) = rows_cols(z_t, "z_t")?;
    if n < 2 {
        return Err(LneError::Invalid("pairwise distances need at least 2 nodes".into()));
    }
    let z = z_t.data();
    let mut p = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: T = (0..d).map(|k| {
                let diff = z[i * d + k] - z[j * d + k];
                diff * diff
            }).sum();
            let dist = s.sqrt();
            p[i * n + j] = dist;
            p[j * n + i] = dist;
        }
    }
    Ok(p)
}

/// Number of neighbours actually used for a batch of `n` nodes.
pub fn effective_neighbors(n: usize, n_nb: usize) -> usize {
    n_nb.min(n.saturating_sub(1))
}

/// The `n_nb` nearest other nodes of every node, nearest first; ties go to
/// the smaller index.
pub fn knn_neighbors<T: Real>(p: &[T], n: usize, n_nb: usize) -> Result<Vec<Vec<usize>>> {
    if n < 2 {
        return Err(LneError::Invalid(format!("k-NN graph needs at least 2 nodes, got {n}")));
    }
    if p.len() != n * n {
        return Err(LneError::Shape(format!("distance matrix has {} entries, expected {}", p.len(), n * n)));
    }
    if n_nb == 0 {
        return Err(LneError::Invalid("neighbour count must be positive".into()));
    }
    let k = effective_neighbors(n, n_nb);
    if k < n_nb {
        log::warn!("n_nb={n_nb} exceeds batch size {n} - 1; clamping to {k}");
    }
    Ok((0..n)
        .map(|i| {
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            cand.sort_by(|&a, &b| {
                p[i * n + a]
                    .partial_cmp(&p[i * n + b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            cand.truncate(k);
            cand
        })
        .collect())
}

/// Gaussian adjacency restricted to the neighbour lists, with per-node
/// bandwidth `σ_i = max_j P[i,j] − min_j P[i,j]` over `j ∈ N_i`. Returns
/// `(A, σ)`.
pub fn adjacency<T: Real>(p: &[T], n: usize, neighbors: &[Vec<usize>]) -> Result<(Vec<T>, Vec<T>)> {
    if neighbors.len() != n || p.len() != n * n {
        return Err(LneError::Shape("adjacency: neighbour lists do not match distance matrix".into()));
    }
    let floor = T::from_f64(SIGMA_FLOOR).unwrap();
    let two = T::from_f64(2.0).unwrap();
    let mut a = vec![T::zero(); n * n];
    let mut sigma = vec![T::zero(); n];
    for (i, nb) in neighbors.iter().enumerate() {
        if nb.is_empty() || nb.iter().any(|&j| j == i || j >= n) {
            return Err(LneError::Invalid(format!("invalid neighbour list for node {i}: {nb:?}")));
        }
        let dists = nb.iter().map(|&j| p[i * n + j]);
        let hi = dists.clone().fold(T::neg_infinity(), T::max);
        let lo = dists.fold(T::infinity(), T::min);
        let s = hi - lo;
        sigma[i] = s;
        for &j in nb {
            a[i * n + j] = if s < floor {
                T::one()
            } else {
                let d = p[i * n + j];
                (-(d * d) / (two * s * s)).exp()
            };
        }
    }
    Ok((a, sigma))
}

/// Row sums of `A` (the diagonal of the out-degree matrix).
pub fn out_degrees<T: Real>(a: &[T], n: usize) -> Vec<T> {
    a.chunks(n).map(|row| row.iter().copied().sum()).collect()
}

/// Row-normalized pooling weights `A[i,j] / D[i]`.
pub fn pooling_weights<T: Real>(a: &[T], n: usize) -> Result<Vec<T>> {
    let deg = out_degrees(a, n);
    if let Some(i) = deg.iter().position(|d| !(*d > T::zero())) {
        return Err(LneError::Degenerate(format!("node {i} has zero out-degree")));
    }
    Ok(a.iter().enumerate().map(|(k, &v)| v / deg[k / n]).collect())
}

/// The same weights as [`pooling_weights`], computed from the exponents with
/// each row shifted by its largest one, so rows whose every `A[i,j]`
/// underflows still normalize.
pub fn stable_pooling_weights<T: Real>(p: &[T], n: usize, neighbors: &[Vec<usize>], sigma: &[T]) -> Result<Vec<T>> {
    if neighbors.len() != n || sigma.len() != n || p.len() != n * n {
        return Err(LneError::Shape("pooling weights: inputs disagree on node count".into()));
    }
    let floor = T::from_f64(SIGMA_FLOOR).unwrap();
    let two = T::from_f64(2.0).unwrap();
    let mut w = vec![T::zero(); n * n];
    for (i, nb) in neighbors.iter().enumerate() {
        if nb.is_empty() {
            return Err(LneError::Degenerate(format!("node {i} has no neighbours")));
        }
        let s = sigma[i];
        let logits: Vec<T> = nb
            .iter()
            .map(|&j| {
                if s < floor {
                    T::zero()
                } else {
                    let d = p[i * n + j];
                    -(d * d) / (two * s * s)
                }
            })
            .collect();
        let top = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = logits.iter().map(|&l| (l - top).exp()).collect();
        let total: T = e.iter().copied().sum();
        for (&j, &ej) in nb.iter().zip(&e) {
            w[i * n + j] = ej / total;
        }
    }
    Ok(w)
}

fn apply_weights<T: Real>(w: &[T], dz: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = rows_cols(dz, "dz")?;
    if w.len() != n * n {
        return Err(LneError::Shape("pooling weights do not match dz rows".into()));
    }
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        for j in 0..n {
            let wij = w[i * n + j];
            if wij == T::zero() {
                continue;
            }
            for k in 0..d {
                out[i * d + k] += wij * dz.data()[j * d + k];
            }
        }
    }
    Tensor::new(vec![n, d], out)
}

/// `dh[i] = Σ_j (A[i,j] / D[i]) dz[j]`.
pub fn pool_embedding<T: Real>(a: &[T], dz: &Tensor<T>) -> Result<Tensor<T>> {
    let n = rows_cols(dz, "dz")?.0;
    if a.len() != n * n {
        return Err(LneError::Shape("adjacency does not match dz rows".into()));
    }
    apply_weights(&pooling_weights(a, n)?, dz)
}

/// Directed k-NN graph of one mini-batch.
#[derive(Clone, Debug)]
pub struct NeighborhoodGraph<T> {
    pub n: usize,
    pub p: Vec<T>,
    pub neighbors: Vec<Vec<usize>>,
    pub a: Vec<T>,
    pub sigma: Vec<T>,
    pub out_degree: Vec<T>,
    /// Row-normalized pooling weights.
    pub w: Vec<T>,
}

impl<T: Real> NeighborhoodGraph<T> {
    /// Build the graph on start points `z_t: [N,d]`.
    pub fn build(z_t: &Tensor<T>, n_nb: usize) -> Result<Self> {
        let p = pairwise_distances(z_t)?;
        let n = z_t.shape()[0];
        let neighbors = knn_neighbors(&p, n, n_nb)?;
        let (a, sigma) = adjacency(&p, n, &neighbors)?;
        let out_degree = out_degrees(&a, n);
        let w = stable_pooling_weights(&p, n, &neighbors, &sigma)?;
        Ok(NeighborhoodGraph {
            n,
            p,
            neighbors,
            a,
            sigma,
            out_degree,
            w,
        })
    }

    pub fn weights(&self) -> Result<Tensor<T>> {
        Tensor::new(vec![self.n, self.n], self.w.clone())
    }

    pub fn pool(&self, dz: &Tensor<T>) -> Result<Tensor<T>> {
        apply_weights(&self.w, dz)
    }

    /// Pool on a tape. Gradients reach `dz` unless it was detached.
    pub fn pool_on(&self, tape: &mut Tape<T>, dz: Var) -> Result<Var> {
        let w = self.weights()?;
        tape.matmul_const(&w, dz)
    }

    /// Text dump: one `node` row per node (σ, out-degree), one `edge` row per edge.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# node,i,sigma,out_degree")?;
        for i in 0..self.n {
            writeln!(w, "node,{i},{},{}", self.sigma[i], self.out_degree[i])?;
        }
        writeln!(w, "# edge,i,j,P_ij,A_ij")?;
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                writeln!(w, "edge,{i},{j},{},{}", self.p[i * self.n + j], self.a[i * self.n + j])?;
            }
        }
        Ok(())
    }
}

/// Compose distances, neighbours, adjacency and pooling for a latent batch.
pub fn build_graph<T: Real>(batch: &LatentBatch<T>, n_nb: usize) -> Result<(NeighborhoodGraph<T>, Tensor<T>)> {
    if batch.len() < 2 {
        return Err(LneError::Invalid("graph construction needs at least 2 pairs".into()));
    }
    let dz = trajectory_vectors(&batch.z_t, &batch.z_s, &batch.delta_t)?;
    let graph = NeighborhoodGraph::build(&batch.z_t, n_nb)?;
    let dh = graph.pool(&dz)?;
    Ok((graph, dh))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn trajectory_arithmetic() {
        let dz = trajectory_vectors(&t(1, 2, &[0.0, 0.0]), &t(1, 2, &[2.0, 4.0]), &[2.0]).unwrap();
        assert_eq!(dz.data(), &[1.0, 2.0]);
        let zero = trajectory_vectors(&t(1, 2, &[1.5, -3.0]), &t(1, 2, &[1.5, -3.0]), &[0.7]).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0]);
    }

    #[test]
    fn doubling_delta_t_halves_exactly() {
        let zt = t(2, 3, &[0.1, 0.2, 0.3, -1.0, 0.5, 2.0]);
        let zs = t(2, 3, &[0.7, -0.4, 1.3, 0.3, 0.9, -2.2]);
        let a = trajectory_vectors(&zt, &zs, &[1.3, 0.7]).unwrap();
        let b = trajectory_vectors(&zt, &zs, &[2.6, 1.4]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x / 2.0, *y);
        }
    }

    #[test]
    fn non_positive_delta_t_is_rejected() {
        let zt = t(1, 1, &[0.0]);
        assert!(trajectory_vectors(&zt, &zt, &[0.0]).is_err());
        assert!(trajectory_vectors(&zt, &zt, &[-1.0]).is_err());
    }

    #[test]
    fn distances_345() {
        let p = pairwise_distances(&t(2, 2, &[0.0, 0.0, 3.0, 4.0])).unwrap();
        assert_eq!(p, vec![0.0, 5.0, 5.0, 0.0]);
        let same = pairwise_distances(&t(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0])).unwrap();
        assert!(same.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn knn_on_a_line() {
        let p = pairwise_distances(&t(3, 1, &[0.0, 1.0, 3.0])).unwrap();
        let nb = knn_neighbors(&p, 3, 1).unwrap();
        assert_eq!(nb, vec![vec![1], vec![0], vec![1]]);
        let all = knn_neighbors(&p, 3, 2).unwrap();
        assert_eq!(all, vec![vec![1, 2], vec![0, 2], vec![1, 0]]);
    }

    #[test]
    fn knn_tie_goes_to_lower_index() {
        // node 1 is equidistant from 0 and 2
        let p = pairwise_distances(&t(3, 1, &[0.0, 1.0, 2.0])).unwrap();
        let nb = knn_neighbors(&p, 3, 1).unwrap();
        assert_eq!(nb[1], vec![0]);
    }

    #[test]
    fn knn_clamps_oversized_neighbourhoods() {
        let p = pairwise_distances(&t(3, 1, &[0.0, 1.0, 3.0])).unwrap();
        let nb = knn_neighbors(&p, 3, 5).unwrap();
        assert!(nb.iter().all(|l| l.len() == 2));
        assert!(knn_neighbors(&[0.0f64], 1, 1).is_err());
    }

    #[test]
    fn degenerate_bandwidth_means_equal_weights() {
        let p = pairwise_distances(&t(3, 1, &[0.0, 1.0, 3.0])).unwrap();
        let nb = knn_neighbors(&p, 3, 1).unwrap();
        let (a, sigma) = adjacency(&p, 3, &nb).unwrap();
        assert!(sigma.iter().all(|&s| s == 0.0));
        assert_eq!(a[1], 1.0);
        assert_eq!(a[3], 1.0);
        assert_eq!(a[7], 1.0);
    }

    #[test]
    fn self_loops_are_rejected() {
        let p = vec![0.0f64, 1.0, 1.0, 0.0];
        assert!(adjacency(&p, 2, &[vec![0], vec![0]]).is_err());
    }

    #[test]
    fn two_nodes_swap_trajectories() {
        let batch = LatentBatch::new(
            t(2, 2, &[0.0, 0.0, 1.0, 1.0]),
            t(2, 2, &[1.0, 0.0, 1.0, 3.0]),
            vec![1.0, 2.0],
        )
        .unwrap();
        let (g, dh) = build_graph(&batch, 1).unwrap();
        assert_eq!(g.neighbors, vec![vec![1], vec![0]]);
        assert_eq!(dh.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn dump_lists_every_edge() {
        let g = NeighborhoodGraph::build(&t(4, 1, &[0.0, 1.0, 3.0, 7.0]), 2).unwrap();
        let mut buf = Vec::new();
        g.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("edge,")).count(), 8);
        assert_eq!(text.lines().filter(|l| l.starts_with("node,")).count(), 4);
    }

    #[test]
    fn stable_weights_match_normalized_adjacency() {
        let z = t(5, 2, &[0.0, 0.0, 1.0, 0.2, 0.3, 2.0, -1.5, 0.4, 2.2, -0.7]);
        let p = pairwise_distances(&z).unwrap();
        let nb = knn_neighbors(&p, 5, 3).unwrap();
        let (a, sigma) = adjacency(&p, 5, &nb).unwrap();
        let direct = pooling_weights(&a, 5).unwrap();
        let stable = stable_pooling_weights(&p, 5, &nb, &sigma).unwrap();
        for (x, y) in direct.iter().zip(&stable) {
            assert!((x - y).abs() < 1e-14, "{x} vs {y}");
        }
    }

    #[test]
    fn far_tight_neighbourhoods_still_pool() {
        // neighbours of node 0 sit at 100 and 100.1: every A[0,j] underflows
        let z = t(3, 1, &[0.0, 100.0, 100.1]);
        let p = pairwise_distances(&z).unwrap();
        let nb = knn_neighbors(&p, 3, 2).unwrap();
        let (a, _) = adjacency(&p, 3, &nb).unwrap();
        assert_eq!(a[1] + a[2], 0.0);
        let g = NeighborhoodGraph::build(&z, 2).unwrap();
        let row: f64 = g.w[..3].iter().sum();
        assert!((row - 1.0).abs() < 1e-12);
        assert!(g.w[1] > g.w[2]);
    }
}
