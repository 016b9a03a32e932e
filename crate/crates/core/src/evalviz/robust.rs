use crate::error::{LneError, Result};

pub const HUBER_DELTA: f64 = 1.345;
pub const IRLS_MAX_ITERS: usize = 50;
pub const IRLS_TOL: f64 = 1e-8;
/// MAD → standard deviation under normality.
const MAD_SCALE: f64 = 0.674_489_750_196_081_7;

/// `y = a + b·x + c·x²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl QuadraticFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.a + self.b * x + self.c * x * x
    }

    pub fn coefficients(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }
}

/// Solve the 3×3 weighted normal equations in the standardized abscissa.
fn weighted_ls(u: &[f64], y: &[f64], w: &[f64]) -> Result<[f64; 3]> {
    let mut m = [[0.0f64; 4]; 3];
    for ((&ui, &yi), &wi) in u.iter().zip(y).zip(w) {
        let row = [1.0, ui, ui * ui];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] += wi * row[r] * row[c];
            }
            m[r][3] += wi * row[r] * yi;
        }
    }
    let scale = m[0][0].abs().max(m[2][2].abs());
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .expect("non-empty");
        if m[piv][col].abs() <= 1e-12 * scale {
            return Err(LneError::Degenerate("quadratic design matrix is singular".into()));
        }
        m.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..4 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    Ok([m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]])
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ordinary least-squares quadratic.
pub fn least_squares_quadratic(x: &[f64], y: &[f64]) -> Result<QuadraticFit> {
    fit(x, y, 0)
}

/// Huber-weighted IRLS quadratic. Residuals are scaled by their MAD
/// (normal-consistent); the loop stops once no coefficient moves by more
/// than 1e-8 or after 50 reweightings.
pub fn robust_quadratic_fit(x: &[f64], y: &[f64]) -> Result<QuadraticFit> {
    fit(x, y, IRLS_MAX_ITERS)
}

fn fit(x: &[f64], y: &[f64], max_iters: usize) -> Result<QuadraticFit> {
    if x.len() != y.len() {
        return Err(LneError::Shape("x and y lengths differ".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(LneError::NonFinite("quadratic fit input".into()));
    }
    let mut distinct = x.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(LneError::Degenerate("quadratic fit needs at least 3 distinct x".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n).sqrt();
    let u: Vec<f64> = x.iter().map(|v| (v - mx) / sx).collect();
    let mut w = vec![1.0; x.len()];
    let mut beta = weighted_ls(&u, y, &w)?;
    let mut iterations = 0;
    let mut converged = max_iters == 0;
    while iterations < max_iters {
        let r: Vec<f64> = u
            .iter()
            .zip(y)
            .map(|(&ui, &yi)| yi - (beta[0] + beta[1] * ui + beta[2] * ui * ui))
            .collect();
        let scale = median(r.iter().map(|v| v.abs()).collect()) / MAD_SCALE;
        if !(scale > 1e-300) {
            converged = true;
            break;
        }
        for (wi, ri) in w.iter_mut().zip(&r) {
            let s = (ri / scale).abs();
            *wi = if s <= HUBER_DELTA { 1.0 } else { HUBER_DELTA / s };
        }
        let next = weighted_ls(&u, y, &w)?;
        iterations += 1;
        let change = next.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        beta = next;
        if change < IRLS_TOL {
            converged = true;
            break;
        }
    }
    // back from the standardized abscissa u = (x − mx)/sx
    let (b0, b1, b2) = (beta[0], beta[1] / sx, beta[2] / (sx * sx));
    Ok(QuadraticFit {
        a: b0 - b1 * mx + b2 * mx * mx,
        b: b1 - 2.0 * b2 * mx,
        c: b2,
        iterations,
        converged,
    })
}
