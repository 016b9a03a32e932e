use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{LneError, Result};

fn check_lengths(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(LneError::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < 2 {
        return Err(LneError::Invalid("metrics need at least 2 samples".into()));
    }
    Ok(())
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(LneError::Degenerate("R2 is undefined for constant targets".into()));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, y)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let mse = pred.iter().zip(target).map(|(p, y)| (y - p).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Balanced accuracy: unweighted mean of per-class recalls over classes `0..n_classes`.
pub fn bacc(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(LneError::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut hits = vec![0usize; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if t >= n_classes {
            return Err(LneError::Invalid(format!("label {t} out of range for {n_classes} classes")));
        }
        counts[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(LneError::Degenerate(format!("class {c} has no samples")));
    }
    let recall: f64 = hits.iter().zip(&counts).map(|(&h, &n)| h as f64 / n as f64).sum();
    Ok(recall / n_classes as f64)
}

/// Inverse-frequency class weights normalized to sum to one.
pub fn class_weights(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(LneError::Invalid(format!("label {l} out of range for {n_classes} classes")));
        }
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&n| n > 0).count();
    if present < 2 {
        return Err(LneError::Degenerate("training targets contain a single class".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(LneError::Degenerate(format!("class {c} has no training samples")));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let z: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|w| w / z).collect())
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Welch two-sample test result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Largest Welch–Satterthwaite df for which the normal approximation is refused.
pub const NORMAL_APPROX_MIN_DF: f64 = 30.0;

/// Welch's t statistic with a two-sided p-value from the normal
/// approximation; refused when `df ≤ 30`, where it would be too optimistic.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(LneError::Invalid("Welch test needs at least 2 samples per group".into()));
    }
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        if ma == mb {
            return Ok(WelchTest {
                t: 0.0,
                df: f64::INFINITY,
                p: 1.0,
            });
        }
        return Err(LneError::Degenerate("both groups have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    if !(df > NORMAL_APPROX_MIN_DF) {
        return Err(LneError::Invalid(format!(
            "Welch df {df:.1} ≤ {NORMAL_APPROX_MIN_DF}; the normal approximation does not apply"
        )));
    }
    Ok(WelchTest {
        t,
        df,
        p: erfc(t.abs() / std::f64::consts::SQRT_2),
    })
}

/// One-sided paired t-test of `H1: mean(a − b) < 0`, exact Student-t
/// distribution. Returns `(t, p)`; all-equal differences give `p = 0.5`
/// when the mean is zero.
pub fn paired_t_less(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(LneError::Invalid("paired test needs two equal-length samples of size ≥ 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (m, s) = mean_sd(&d);
    let se = s / (d.len() as f64).sqrt();
    if se == 0.0 {
        let p = if m < 0.0 {
            0.0
        } else if m > 0.0 {
            1.0
        } else {
            0.5
        };
        return Ok((m.signum() * f64::INFINITY, p));
    }
    let t = m / se;
    let dist = StudentsT::new(0.0, 1.0, d.len() as f64 - 1.0).map_err(|e| LneError::Invalid(e.to_string()))?;
    Ok((t, dist.cdf(t)))
}
