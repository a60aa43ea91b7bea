use super::posterior::{NoiseModel, VariationalPosterior};
use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::operator::Network;
use crate::rng::{stream, SeededRng};
use crate::spectral::Field;

/// Monte-Carlo posterior predictive for one input.
#[derive(Debug, Clone)]
pub struct PredictiveSamples {
    pub samples: Vec<Field>,
    pub mean: Field,
    /// Population standard deviation across samples.
    pub std: Field,
}

/// Everything needed to sample predictions.
#[derive(Debug, Clone, Copy)]
pub struct PredictiveModel<'a> {
    pub net: &'a Network,
    pub store: &'a ParamStore,
    pub posterior: &'a VariationalPosterior,
    /// `None` leaves samples noise-free.
    pub noise: Option<NoiseModel>,
}

/// Draws `S` outputs: `τ ~ q`, a forward pass, then `N(0, σ²)` noise at every
/// point when the model has noise. Sample `s` of element `index` uses its own
/// sub-stream, so results do not depend on evaluation order.
pub fn posterior_predictive(
    model: &PredictiveModel<'_>,
    input: &Field,
    samples: usize,
    seed: u64,
    index: u64,
) -> Result<PredictiveSamples> {
    if samples == 0 {
        return Err(Error::config("posterior predictive needs at least one sample"));
    }
    let PredictiveModel { net, store, posterior: post, noise } = *model;
    let sigma = noise.map_or(0.0, |n| n.std());
    let mut out = Vec::with_capacity(samples);
    for s in 0..samples {
        let mut rng = SeededRng::substream(seed, stream::SAMPLE_BASE, index.wrapping_mul(samples as u64).wrapping_add(s as u64));
        let eps = post.draw_eps(&mut rng);
        let log_times = post.sample_log_times(&eps)?;
        let mut y = net.predict(store, input, &log_times)?;
        if sigma > 0.0 {
            for v in y.values_mut() {
                *v += sigma * rng.normal();
            }
        }
        out.push(y);
    }
    let (mean, std) = moments(&out);
    Ok(PredictiveSamples { samples: out, mean, std })
}

/// Pointwise mean and population standard deviation of same-shaped fields.
pub fn moments(fields: &[Field]) -> (Field, Field) {
    let first = &fields[0];
    let n = fields.len() as f64;
    let len = first.values().len();
    let mut mean = vec![0.0; len];
    for f in fields {
        for (m, v) in mean.iter_mut().zip(f.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; len];
    for f in fields {
        for ((s, v), m) in var.iter_mut().zip(f.values()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    let grid = first.grid().clone();
    let c = first.channels();
    (Field::from_parts(grid.clone(), c, mean), Field::from_parts(grid, c, std))
}
