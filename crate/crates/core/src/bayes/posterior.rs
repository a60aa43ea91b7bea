use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Log-normal prior on every diffusion time: `ln τ ~ N(mean, std²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimePrior {
    pub mean: f64,
    pub std: f64,
}

impl Default for TimePrior {
    fn default() -> Self {
        TimePrior { mean: 0.01f64.ln(), std: 1.0 }
    }
}

impl TimePrior {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        let p = TimePrior { mean, std };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() || !(self.std > 0.0) || !self.std.is_finite() {
            return Err(Error::config(format!("prior needs finite mean and std > 0, got N({}, {}²)", self.mean, self.std)));
        }
        Ok(())
    }
}

/// Gaussian over one block's log-times: `ln τ = mean + L ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPosterior {
    pub mean: Vec<f64>,
    /// Lower-triangular `L`, row-major `c × c`.
    pub chol: Vec<f64>,
}

impl BlockPosterior {
    pub fn isotropic(width: usize, mean: f64, std: f64) -> Self {
        let mut chol = vec![0.0; width * width];
        for c in 0..width {
            chol[c * width + c] = std;
        }
        BlockPosterior { mean: vec![mean; width], chol }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// `Σ = L Lᵀ`, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let c = self.width();
        let mut s = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                s[i * c + j] = (0..=i.min(j)).map(|k| self.chol[i * c + k] * self.chol[j * c + k]).sum();
            }
        }
        s
    }

    /// `ln det Σ`; `-inf` for a degenerate factor.
    pub fn log_det(&self) -> f64 {
        let c = self.width();
        (0..c).map(|i| 2.0 * self.chol[i * c + i].ln()).sum()
    }

    pub fn sample_log_times(&self, eps: &[f64]) -> Vec<f64> {
        let c = self.width();
        (0..c)
            .map(|i| self.mean[i] + (0..=i).map(|k| self.chol[i * c + k] * eps[k]).sum::<f64>())
            .collect()
    }
}

/// Per-block full-rank Gaussian posterior over log diffusion times.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    width: usize,
    blocks: Vec<BlockPosterior>,
}

impl VariationalPosterior {
    /// A zero diagonal in `L` is allowed (degenerate, deterministic times).
    pub fn new(width: usize, blocks: Vec<BlockPosterior>) -> Result<Self> {
        for (i, b) in blocks.iter().enumerate() {
            if b.mean.len() != width || b.chol.len() != width * width {
                return Err(Error::shape(format!("posterior block {i} does not have width {width}")));
            }
            if b.mean.iter().chain(&b.chol).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("posterior block {i}")));
            }
            for r in 0..width {
                if b.chol[r * width + r] < 0.0 {
                    return Err(Error::domain(format!("posterior block {i}: negative Cholesky diagonal")));
                }
                if b.chol[r * width + r + 1..(r + 1) * width].iter().any(|&x| x != 0.0) {
                    return Err(Error::domain(format!("posterior block {i}: factor is not lower-triangular")));
                }
            }
        }
        Ok(VariationalPosterior { width, blocks })
    }

    pub fn isotropic(blocks: usize, width: usize, mean: f64, std: f64) -> Self {
        VariationalPosterior { width, blocks: vec![BlockPosterior::isotropic(width, mean, std); blocks] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[BlockPosterior] {
        &self.blocks
    }

    pub fn draw_eps(&self, rng: &mut SeededRng) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .map(|_| {
                let mut e = vec![0.0; self.width];
                rng.fill_normal(&mut e);
                e
            })
            .collect()
    }

    /// `ln τ_i = μ_i + L_i ε_i` for every block.
    pub fn sample_log_times(&self, eps: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if eps.len() != self.blocks.len() || eps.iter().any(|e| e.len() != self.width) {
            return Err(Error::shape(format!("need {} x {} standard normal draws", self.blocks.len(), self.width)));
        }
        Ok(self.blocks.iter().zip(eps).map(|(b, e)| b.sample_log_times(e)).collect())
    }

    pub fn sample_times(&self, eps: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.sample_log_times(eps)?.into_iter().map(|b| b.into_iter().map(f64::exp).collect()).collect())
    }

    pub fn mean_log_times(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| b.mean.clone()).collect()
    }
}

/// Closed-form `KL[q ‖ p]` summed over blocks. Infinite for a degenerate `q`.
pub fn kl_divergence(post: &VariationalPosterior, prior: &TimePrior) -> f64 {
    let c = post.width() as f64;
    let var = prior.std * prior.std;
    post.blocks()
        .iter()
        .map(|b| {
            let trace: f64 = b.chol.iter().map(|l| l * l).sum();
            let dist: f64 = b.mean.iter().map(|m| (m - prior.mean).powi(2)).sum();
            0.5 * (trace / var + dist / var - c + c * var.ln() - b.log_det())
        })
        .sum()
}

/// Pointwise Gaussian likelihood with variance `exp(log_var)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub log_var: f64,
}

impl NoiseModel {
    pub fn from_std(std: f64) -> Self {
        NoiseModel { log_var: 2.0 * std.ln() }
    }

    pub fn variance(&self) -> f64 {
        self.log_var.exp()
    }

    pub fn std(&self) -> f64 {
        (0.5 * self.log_var).exp()
    }
}
