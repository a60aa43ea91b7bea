//! Central-difference gradient verification.

use crate::error::Result;
use crate::nn::params::{GradBuffer, ParamStore};

/// A scalar objective over a parameter store with an analytic gradient.
pub trait Objective {
    fn loss(&self, store: &ParamStore) -> Result<f64>;

    /// Loss value; gradients are added into `grads`.
    fn loss_and_grad(&self, store: &ParamStore, grads: &mut GradBuffer) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    /// Relative step; coordinate `θ` is perturbed by `h * max(1, |θ|)`.
    pub h: f64,
    /// Error is measured as `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_per_tensor: Option<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { h: 1e-6, floor: 1e-3, tolerance: 1e-5, max_per_tensor: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}, {} coordinates)",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.worst_param,
            self.worst_index,
            self.analytic,
            self.numeric,
            self.checked
        )
    }
}

pub fn gradcheck(objective: &dyn Objective, store: &ParamStore, config: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut grads = store.grad_buffer();
    objective.loss_and_grad(store, &mut grads)?;
    let mut probe = store.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        passed: true,
    };
    for idx in 0..store.len() {
        let len = store.value(idx).len();
        let stride = match config.max_per_tensor {
            Some(cap) if cap > 0 && len > cap => len.div_ceil(cap),
            _ => 1,
        };
        for i in (0..len).step_by(stride) {
            let orig = store.value(idx)[i];
            let step = config.h * orig.abs().max(1.0);
            probe.value_mut(idx)[i] = orig + step;
            let up = objective.loss(&probe)?;
            probe.value_mut(idx)[i] = orig - step;
            let down = objective.loss(&probe)?;
            probe.value_mut(idx)[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(idx)[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(config.floor);
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst_param = store.name(idx).to_string();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= config.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `0.5 * ||W x - y||^2` for a fixed `x`, `y`.
    struct LeastSquares {
        x: Vec<f64>,
        y: Vec<f64>,
        corrupt: bool,
    }

    impl Objective for LeastSquares {
        fn loss(&self, store: &ParamStore) -> Result<f64> {
            let w = store.value(0);
            let n = self.x.len();
            Ok(self
                .y
                .iter()
                .enumerate()
                .map(|(o, y)| {
                    let r: f64 = (0..n).map(|i| w[o * n + i] * self.x[i]).sum::<f64>() - y;
                    0.5 * r * r
                })
                .sum())
        }

        fn loss_and_grad(&self, store: &ParamStore, grads: &mut GradBuffer) -> Result<f64> {
            let w = store.value(0);
            let n = self.x.len();
            let g = grads.get_mut(0);
            let mut loss = 0.0;
            for (o, y) in self.y.iter().enumerate() {
                let r: f64 = (0..n).map(|i| w[o * n + i] * self.x[i]).sum::<f64>() - y;
                loss += 0.5 * r * r;
                for i in 0..n {
                    // (Wx - y) x^T
                    g[o * n + i] += r * self.x[i] * if self.corrupt && o == 0 { 1.1 } else { 1.0 };
                }
            }
            Ok(loss)
        }
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", vec![2, 3], vec![0.3, -0.2, 0.5, 1.1, 0.0, -0.7], true).unwrap();
        s
    }

    #[test]
    fn least_squares_gradient_is_exact() {
        let obj = LeastSquares { x: vec![1.0, 2.0, -1.5], y: vec![0.5, -0.25], corrupt: false };
        let cfg = GradcheckConfig { floor: 1.0, tolerance: 1e-9, ..Default::default() };
        let r = gradcheck(&obj, &store(), &cfg).unwrap();
        assert!(r.passed, "{r}");
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let obj = LeastSquares { x: vec![1.0, 2.0, -1.5], y: vec![0.5, -0.25], corrupt: true };
        let r = gradcheck(&obj, &store(), &GradcheckConfig::default()).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_param, "w");
        assert!(r.worst_index < 3);
    }
}
