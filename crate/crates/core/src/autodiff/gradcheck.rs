use crate::error::{LneError, Result};

use super::{Tape, Tensor, Var};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)
    pub max_rel_error: f64,
    /// (input index, element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Check `f`'s reverse-mode gradient w.r.t. every element of every input
/// with central differences of step `step`. `f` receives a fresh tape and
/// the inputs registered on it as `requires_grad` leaves and must return a
/// scalar.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, step, |_, _| {})
}

/// [`grad_check`] with a hook that may rewrite the analytic gradient of each
/// input before comparison. Used to prove the checker flags bad gradients.
pub fn grad_check_with<F, H>(f: F, inputs: &[Tensor<f64>], step: f64, tamper: H) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    H: Fn(usize, &mut [f64]),
{
    check(f, inputs, step, tamper, false)
}

/// [`grad_check_with`] for piecewise-linear networks: the leaky-ReLU signs
/// and max-pool winners of the unperturbed evaluation are replayed in every
/// perturbed one, so the differences stay on the linear piece whose
/// gradient reverse mode returns even when `x ± step` would cross a kink.
pub fn grad_check_frozen_routing<F, H>(f: F, inputs: &[Tensor<f64>], step: f64, tamper: H) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    H: Fn(usize, &mut [f64]),
{
    check(f, inputs, step, tamper, true)
}

fn check<F, H>(f: F, inputs: &[Tensor<f64>], step: f64, tamper: H, freeze: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    H: Fn(usize, &mut [f64]),
{
    let mut tape = Tape::new();
    if freeze {
        tape.record_routing();
    }
    let vars = inputs.iter().map(|x| tape.param(x.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let routing = tape.take_routing();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        if let Some(r) = &routing {
            tape.replay_routing(r.clone());
        }
        let vars = xs.iter().map(|x| tape.param(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(LneError::Tape("grad_check function must be scalar-valued".into()));
        }
        Ok(v.item())
    };

    let grads = tape.backward(out)?;
    let mut analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.tensor(v).map(Tensor::into_data))
        .collect::<Result<_>>()?;
    for (i, g) in analytic.iter_mut().enumerate() {
        tamper(i, g);
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            let ad = analytic[i][j];
            let err = (ad - numeric).abs() / ad.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = ad;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_essentially_exact() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.7, -0.1]).unwrap();
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 5);
    }

    #[test]
    fn tampered_gradient_is_flagged() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check_with(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-5,
            |_, g| g[1] *= 1.01,
        )
        .unwrap();
        assert!(r.max_rel_error > 5e-3);
        assert_eq!(r.worst, (0, 1));
    }

    #[test]
    fn frozen_routing_stays_on_one_linear_piece() {
        // 3e-6 sits inside the ±1e-5 window around the kink of leaky-relu
        let x = Tensor::new(vec![2], vec![3e-6, 1.0]).unwrap();
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.leaky_relu(v[0], 0.2)?;
            t.sum(y)
        };
        let free = grad_check(f, std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(free.max_rel_error > 0.1, "{free:?}");
        let frozen = grad_check_frozen_routing(f, &[x], 1e-5, |_, _| {}).unwrap();
        assert!(frozen.max_rel_error < 1e-9, "{frozen:?}");
    }
}
