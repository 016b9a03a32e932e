use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{LneError, Result};
use crate::model::{is_decay_exempt, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient; batchnorm parameters are exempt.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: BTreeMap<String, Vec<f32>>,
    pub second_moment: BTreeMap<String, Vec<f32>>,
}

/// One Adam update of every parameter present in `grads`.
///
/// All gradients are checked before anything is touched, so a non-finite
/// gradient leaves parameters and state unchanged.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(LneError::Shape(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(LneError::NonFinite(format!("gradient of parameter {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let (c1, c2) = ((1.0 - cfg.beta1) as f32, (1.0 - cfg.beta2) as f32);
    let step_size = (cfg.lr / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let eps = cfg.eps as f32;
    for (name, g) in grads {
        let decay = if is_decay_exempt(name) { 0.0 } else { cfg.weight_decay as f32 };
        let p = params.get_mut(name)?;
        let n = p.numel();
        let m = state.first_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.second_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            return Err(LneError::Shape(format!("optimizer state for {name} does not match the parameter")));
        }
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi + decay * *w;
            *mi = b1 * *mi + c1 * gi;
            *vi = b2 * *vi + c2 * gi * gi;
            *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32) -> ModelParams<f32> {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    fn grad(value: f32) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(value))])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = single(0.0);
        let mut s = OptimizerState::default();
        adam_step(&mut p, &grad(1.0), &mut s, &cfg).unwrap();
        let w = p.get("w").unwrap().item();
        assert!((w + 5e-4).abs() < 1e-9, "{w}");
        assert_eq!(s.step, 1);
    }

    #[test]
    fn matches_reference_over_steps() {
        let cfg = AdamConfig::default();
        let mut p = single(0.5);
        let mut s = OptimizerState::default();
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let g = (t as f64 * 0.37).sin();
            adam_step(&mut p, &grad(g as f32), &mut s, &cfg).unwrap();
            let gd = g + 1e-5 * w;
            m = 0.9 * m + 0.1 * gd;
            v = 0.999 * v + 0.001 * gd * gd;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 5e-4 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.get("w").unwrap().item() as f64 - w).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_exempt_from_decay() {
        let cfg = AdamConfig {
            weight_decay: 1.0,
            ..AdamConfig::default()
        };
        let mut p = ModelParams::new();
        p.insert("enc0.bn.gamma", Tensor::scalar(1.0f32));
        p.insert("enc0.conv.weight", Tensor::scalar(1.0f32));
        let g = BTreeMap::from([
            ("enc0.bn.gamma".to_string(), Tensor::scalar(0.0f32)),
            ("enc0.conv.weight".to_string(), Tensor::scalar(0.0f32)),
        ]);
        adam_step(&mut p, &g, &mut OptimizerState::default(), &cfg).unwrap();
        assert_eq!(p.get("enc0.bn.gamma").unwrap().item(), 1.0);
        assert!(p.get("enc0.conv.weight").unwrap().item() < 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = single(0.5);
        let mut s = OptimizerState::default();
        let err = adam_step(&mut p, &grad(f32::NAN), &mut s, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p.get("w").unwrap().item(), 0.5);
        assert_eq!(s, OptimizerState::default());
    }
}
