use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::spectral::{self, Field, Grid, ModeSet};

/// Power-law Gaussian random field on the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomFieldSpec {
    /// Spectral decay: coefficient `k` is scaled by `(1 + ‖k‖²)^(−α/2)`.
    pub alpha: f64,
    /// Mode cut per axis; `None` means `n/4`.
    pub kmax: Option<usize>,
    pub amplitude: f64,
    pub zero_mean: bool,
}

impl Default for RandomFieldSpec {
    fn default() -> Self {
        RandomFieldSpec { alpha: 2.0, kmax: None, amplitude: 1.0, zero_mean: false }
    }
}

impl RandomFieldSpec {
    pub fn validate(&self, ndim: usize) -> Result<()> {
        if !(self.alpha > ndim as f64 / 2.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("spectral exponent {} must exceed d/2 = {}", self.alpha, ndim as f64 / 2.0)));
        }
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::config("field amplitude must be finite and nonnegative"));
        }
        if self.kmax == Some(0) {
            return Err(Error::config("field kmax must be at least 1"));
        }
        Ok(())
    }

    pub fn modes(&self, grid: &Grid) -> Result<ModeSet> {
        ModeSet::new(grid.dims().iter().map(|&n| self.kmax.unwrap_or((n / 4).max(1))).collect())
    }
}

/// Draws a real field whose retained coefficients have independent `N(0,1)`
/// real and imaginary parts scaled by `amplitude (1 + s)^(−α/2)`.
pub fn sample_random_field(spec: &RandomFieldSpec, grid: &Grid, channels: usize, rng: &mut SeededRng) -> Result<Field> {
    spec.validate(grid.ndim())?;
    let modes = spec.modes(grid)?;
    let plan = spectral::plan(grid, &modes)?;
    let mut coeffs = vec![Complex64::new(0.0, 0.0); plan.num_modes() * channels];
    for (m, chunk) in coeffs.chunks_exact_mut(channels).enumerate() {
        let s = plan.sq_norms()[m];
        let scale = spec.amplitude * (1.0 + s).powf(-spec.alpha / 2.0);
        for z in chunk {
            let re = rng.normal();
            let im = rng.normal();
            *z = if s == 0.0 && spec.zero_mean { Complex64::new(0.0, 0.0) } else { Complex64::new(re, im) * scale };
        }
    }
    let mut values = vec![0.0; grid.len() * channels];
    plan.synthesize(&coeffs, channels, true, &mut values);
    Field::new(grid.clone(), channels, values)
}
