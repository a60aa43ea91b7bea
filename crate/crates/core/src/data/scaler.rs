use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::Field;

/// Per-channel standardization with population statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels with zero spread pass through unchanged.
    pub constant: Vec<bool>,
}

impl StandardScaler {
    /// Statistics over every point of every field.
    pub fn fit(fields: &[Field]) -> Result<Self> {
        let first = fields.first().ok_or_else(|| Error::shape("cannot fit a scaler on no data"))?;
        let c = first.channels();
        if fields.iter().any(|f| f.channels() != c) {
            return Err(Error::shape("scaler inputs have differing channel counts"));
        }
        let mut count = 0usize;
        let mut sum = vec![0.0; c];
        for f in fields {
            for p in f.values().chunks_exact(c) {
                sum.iter_mut().zip(p).for_each(|(s, v)| *s += v);
            }
            count += f.grid().len();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c];
        for f in fields {
            for p in f.values().chunks_exact(c) {
                for ((s, v), m) in sq.iter_mut().zip(p).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        let constant = std.iter().zip(&mean).map(|(s, m)| *s <= 1e-12 * m.abs().max(1.0)).collect();
        Ok(StandardScaler { mean, std, constant })
    }

    pub fn identity(channels: usize) -> Self {
        StandardScaler { mean: vec![0.0; channels], std: vec![1.0; channels], constant: vec![true; channels] }
    }

    fn check(&self, f: &Field) -> Result<()> {
        if f.channels() != self.mean.len() {
            return Err(Error::shape(format!("scaler has {} channels, field has {}", self.mean.len(), f.channels())));
        }
        Ok(())
    }

    fn map(&self, f: &Field, op: impl Fn(f64, usize) -> f64) -> Result<Field> {
        self.check(f)?;
        let c = f.channels();
        let values = f.values().iter().enumerate().map(|(i, &v)| op(v, i % c)).collect();
        Field::new(f.grid().clone(), c, values)
    }

    pub fn apply(&self, f: &Field) -> Result<Field> {
        self.map(f, |v, c| if self.constant[c] { v } else { (v - self.mean[c]) / self.std[c] })
    }

    pub fn invert(&self, f: &Field) -> Result<Field> {
        self.map(f, |v, c| if self.constant[c] { v } else { v * self.std[c] + self.mean[c] })
    }

    /// Maps a standard deviation in scaled units back to data units.
    pub fn invert_std(&self, f: &Field) -> Result<Field> {
        self.map(f, |v, c| if self.constant[c] { v } else { v * self.std[c] })
    }
}
