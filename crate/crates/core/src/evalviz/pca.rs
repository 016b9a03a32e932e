use crate::error::{LneError, Result};

pub const PCA_TOL: f64 = 1e-9;
pub const PCA_MAX_ITERS: usize = 1000;
/// Eigenvalues at or below this fraction of the total variance count as zero.
pub const PCA_RANK_TOL: f64 = 1e-12;

/// Top-2 principal axes of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
}

impl Pca2 {
    pub fn project(&self, point: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (k, c) in self.components.iter().enumerate() {
            out[k] = point.iter().zip(&self.mean).zip(c).map(|((x, m), v)| (x - m) * v).sum();
        }
        out
    }

    pub fn project_all(&self, points: &[Vec<f64>]) -> Vec<[f64; 2]> {
        points.iter().map(|p| self.project(p)).collect()
    }
}

fn matvec(c: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|i| (0..d).map(|j| c[i * d + j] * v[j]).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Largest-magnitude coordinate positive; ties resolve to the first index.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn power_iteration(c: &[f64], d: usize) -> (Vec<f64>, f64) {
    // fixed, non-degenerate start so results do not depend on any RNG
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64).collect();
    normalize(&mut v);
    for _ in 0..PCA_MAX_ITERS {
        let mut w = matvec(c, d, &v);
        if normalize(&mut w) == 0.0 {
            return (v, 0.0);
        }
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if delta < PCA_TOL {
            break;
        }
    }
    let lambda: f64 = matvec(c, d, &v).iter().zip(&v).map(|(a, b)| a * b).sum();
    (v, lambda)
}

/// Centered top-2 PCA by power iteration with deflation on the covariance.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Pca2> {
    let m = points.len();
    if m < 3 {
        return Err(LneError::Invalid(format!("PCA needs at least 3 points, got {m}")));
    }
    let d = points[0].len();
    if d < 2 || points.iter().any(|p| p.len() != d) {
        return Err(LneError::Shape("PCA needs points of one common dimension ≥ 2".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (a, x) in mean.iter_mut().zip(p) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut c = vec![0.0; d * d];
    for p in points {
        let x: Vec<f64> = p.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] += x[i] * x[j];
            }
        }
    }
    c.iter_mut().for_each(|v| *v /= (m - 1) as f64);
    let trace: f64 = (0..d).map(|i| c[i * d + i]).sum();
    let (mut v1, l1) = power_iteration(&c, d);
    for i in 0..d {
        for j in 0..d {
            c[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (mut v2, l2) = power_iteration(&c, d);
    if !(trace > 0.0) || l1 <= PCA_RANK_TOL * trace || l2 <= PCA_RANK_TOL * trace {
        return Err(LneError::Degenerate(format!(
            "point cloud has fewer than 2 non-zero principal variances ({l1:.3e}, {l2:.3e})"
        )));
    }
    fix_sign(&mut v1);
    fix_sign(&mut v2);
    Ok(Pca2 {
        mean,
        components: [v1, v2],
        eigenvalues: [l1, l2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_line_points() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64;
                vec![t, 2.0 * t, 1e-4 * ((i % 3) as f64 - 1.0)]
            })
            .collect();
        let p = pca_2d(&pts).unwrap();
        let s = 5f64.sqrt();
        assert!((p.components[0][0] - 1.0 / s).abs() < 1e-9);
        assert!((p.components[0][1] - 2.0 / s).abs() < 1e-9);
        assert!(p.eigenvalues[1] < 1e-6 * p.eigenvalues[0]);
    }

    #[test]
    fn exact_line_is_rank_deficient() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, i as f64]).collect();
        assert!(pca_2d(&pts).is_err());
        assert!(pca_2d(&pts[..2]).is_err());
    }

    #[test]
    fn planar_isometry() {
        // points in the plane spanned by two orthonormal 4-vectors
        let u = [0.5, 0.5, 0.5, 0.5];
        let w = [0.5, -0.5, 0.5, -0.5];
        let coords: Vec<[f64; 2]> = (0..12).map(|i| [(i as f64 * 0.7).sin() * 3.0, (i as f64 * 1.3).cos()]).collect();
        let pts: Vec<Vec<f64>> = coords
            .iter()
            .map(|c| (0..4).map(|k| 1.0 + c[0] * u[k] + c[1] * w[k]).collect())
            .collect();
        let p = pca_2d(&pts).unwrap();
        let proj = p.project_all(&pts);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d_in = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let d_out = ((proj[i][0] - proj[j][0]).powi(2) + (proj[i][1] - proj[j][1]).powi(2)).sqrt();
                assert!((d_in - d_out).abs() < 1e-6);
            }
        }
    }
}
