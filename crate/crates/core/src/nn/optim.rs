use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moment accumulators for every store entry.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        OptimizerState { config, step: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update at learning rate `lr` using the accumulated gradients,
/// which are zeroed afterwards. Any non-finite gradient aborts the step
/// before parameters are touched.
pub fn adamw_step(store: &mut ParamStore, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    if let Some((name, _)) = store.iter().find(|(_, t)| t.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    if opt.m.len() != store.len() {
        return Err(Error::shape("optimizer state does not match parameter store"));
    }
    let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = opt.config;
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (idx, (_, tensor)) in store.iter_mut().enumerate() {
        let m = &mut opt.m[idx];
        let v = &mut opt.v[idx];
        let decay = if tensor.decay { 1.0 - lr * weight_decay } else { 1.0 };
        for i in 0..tensor.value.len() {
            let g = tensor.grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            tensor.value[i] = tensor.value[i] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    store.zero_grad();
    if let Some(name) = store.first_non_finite() {
        return Err(Error::NonFinite(format!("parameter {name} after update")));
    }
    Ok(())
}

/// One-cycle schedule: linear warm-up from `max_lr/25` to `max_lr` over the
/// first 30% of steps, then cosine annealing down to `max_lr/1e4`.
pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64) -> f64 {
    let start = max_lr / 25.0;
    let floor = max_lr / 1e4;
    if total_steps == 0 {
        return max_lr;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = 0.3 * total;
    if step <= warm {
        if warm == 0.0 {
            return max_lr;
        }
        start + (max_lr - start) * step / warm
    } else {
        let progress = (step - warm) / (total - warm);
        floor + (max_lr - floor) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", vec![1], vec![value], decay).unwrap();
        s.tensor_mut(0).grad[0] = grad;
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with(1.0, 1.0, true);
        let mut opt = OptimizerState::new(AdamWConfig { lr: 0.1, ..Default::default() }, &s);
        adamw_step(&mut s, &mut opt, 0.1).unwrap();
        assert!((s.value(0)[0] - 0.9).abs() < 1e-8);
        assert_eq!(s.tensor(0).grad[0], 0.0);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = store_with(0.7, 0.0, true);
        let mut opt = OptimizerState::new(AdamWConfig::default(), &s);
        for _ in 0..5 {
            adamw_step(&mut s, &mut opt, 0.1).unwrap();
        }
        assert_eq!(s.value(0)[0], 0.7);
    }

    #[test]
    fn decoupled_decay() {
        let mut s = store_with(2.0, 0.0, true);
        let cfg = AdamWConfig { weight_decay: 0.01, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, &s);
        adamw_step(&mut s, &mut opt, 0.1).unwrap();
        assert!((s.value(0)[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
        // tensors without the decay flag are left alone
        let mut s = store_with(2.0, 0.0, false);
        let mut opt = OptimizerState::new(cfg, &s);
        adamw_step(&mut s, &mut opt, 0.1).unwrap();
        assert_eq!(s.value(0)[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = store_with(1.0, f64::NAN, true);
        let mut opt = OptimizerState::new(AdamWConfig::default(), &s);
        assert!(matches!(adamw_step(&mut s, &mut opt, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(s.value(0)[0], 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn one_cycle_boundaries() {
        let total = 1000;
        assert!((one_cycle_lr(0, total, 1.0) - 0.04).abs() < 1e-15);
        assert!((one_cycle_lr(300, total, 1.0) - 1.0).abs() < 1e-15);
        assert!((one_cycle_lr(total, total, 1.0) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn one_cycle_is_continuous() {
        for total in [100usize, 137, 1000] {
            let max_jump = (0..total)
                .map(|s| (one_cycle_lr(s + 1, total, 1.0) - one_cycle_lr(s, total, 1.0)).abs())
                .fold(0.0, f64::max);
            // adjacent-step changes are bounded by the warm-up slope
            assert!(max_jump <= 0.96 / (0.3 * total as f64) + 1e-12);
            // no discontinuity across the warm-up boundary
            let warm = 0.3 * total as f64;
            let left = 0.04 + 0.96 * (warm.floor() / warm);
            assert!((one_cycle_lr(warm.floor() as usize, total, 1.0) - left).abs() < 1e-12);
        }
    }
}
