use serde::{Deserialize, Serialize};

use super::posterior::{kl_divergence, BlockPosterior, NoiseModel, TimePrior, VariationalPosterior};
use crate::error::{Error, Result};
use crate::nn::gradcheck::Objective;
use crate::nn::params::{GradBuffer, ParamStore};
use crate::operator::{AdjointFault, Network, NetworkSpec};
use crate::rng::SeededRng;
use crate::spectral::Field;

const LN_2PI: f64 = 1.8378770664093453;

/// Starting point for variational training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BayesInit {
    pub prior: TimePrior,
    pub post_mean: f64,
    pub post_std: f64,
    pub log_var: f64,
}

impl Default for BayesInit {
    fn default() -> Self {
        BayesInit { prior: TimePrior::default(), post_mean: -5.0, post_std: 0.5, log_var: -4.0 }
    }
}

#[derive(Debug, Clone, Copy)]
struct PostSlots {
    mu: usize,
    lower: usize,
    log_diag: usize,
}

/// A network whose diffusion times are drawn from a variational posterior.
///
/// The posterior lives in the same [`ParamStore`] as the network weights:
/// `post.{i}.mu`, `post.{i}.chol_lower` (strictly-lower entries packed row by
/// row) and `post.{i}.chol_log_diag`, plus the scalar `noise.log_var`.
#[derive(Debug, Clone)]
pub struct BayesianNetwork {
    net: Network,
    post: Vec<PostSlots>,
    log_var: usize,
}

fn packed(row: usize, col: usize) -> usize {
    row * (row - 1) / 2 + col
}

impl BayesianNetwork {
    pub fn init(spec: &NetworkSpec, rng: &mut SeededRng, init: &BayesInit) -> Result<(Self, ParamStore)> {
        if !spec.block.is_diffusion() {
            return Err(Error::config("Bayesian training needs diffusion blocks"));
        }
        init.prior.validate()?;
        if !(init.post_std > 0.0) {
            return Err(Error::config("initial posterior std must be positive"));
        }
        let (_, mut store) = Network::init(spec, rng, false)?;
        let c = spec.width;
        for i in 0..spec.blocks {
            store.insert(format!("post.{i}.mu"), vec![c], vec![init.post_mean; c], false)?;
            store.insert_zeros(format!("post.{i}.chol_lower"), vec![c * (c - 1) / 2], false)?;
            store.insert(format!("post.{i}.chol_log_diag"), vec![c], vec![init.post_std.ln(); c], false)?;
        }
        store.insert("noise.log_var", vec![1], vec![init.log_var], false)?;
        let model = Self::bind(spec, &store)?;
        Ok((model, store))
    }

    pub fn bind(spec: &NetworkSpec, store: &ParamStore) -> Result<Self> {
        let net = Network::bind(spec, store, false)?;
        let c = spec.width;
        let slot = |name: String, len: usize| -> Result<usize> {
            let i = store.index_of(&name)?;
            if store.tensor(i).len() != len {
                return Err(Error::shape(format!("{name} should hold {len} values")));
            }
            Ok(i)
        };
        let post = (0..spec.blocks)
            .map(|i| {
                Ok(PostSlots {
                    mu: slot(format!("post.{i}.mu"), c)?,
                    lower: slot(format!("post.{i}.chol_lower"), c * (c - 1) / 2)?,
                    log_diag: slot(format!("post.{i}.chol_log_diag"), c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let log_var = slot("noise.log_var".into(), 1)?;
        Ok(BayesianNetwork { net, post, log_var })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: Option<AdjointFault>) -> Self {
        self.net = self.net.with_fault(fault);
        self
    }

    pub fn width(&self) -> usize {
        self.net.spec().width
    }

    pub fn posterior(&self, store: &ParamStore) -> VariationalPosterior {
        let c = self.width();
        let blocks = self
            .post
            .iter()
            .map(|s| {
                let lower = store.value(s.lower);
                let diag = store.value(s.log_diag);
                let mut chol = vec![0.0; c * c];
                for r in 0..c {
                    for k in 0..r {
                        chol[r * c + k] = lower[packed(r, k)];
                    }
                    chol[r * c + r] = diag[r].exp();
                }
                BlockPosterior { mean: store.value(s.mu).to_vec(), chol }
            })
            .collect();
        VariationalPosterior::new(c, blocks).expect("store holds a valid posterior")
    }

    /// Writes `post` into the store. The factor must have a positive diagonal.
    pub fn set_posterior(&self, store: &mut ParamStore, post: &VariationalPosterior) -> Result<()> {
        let c = self.width();
        if post.width() != c || post.num_blocks() != self.post.len() {
            return Err(Error::shape("posterior does not match network"));
        }
        for (s, b) in self.post.iter().zip(post.blocks()) {
            if (0..c).any(|r| !(b.chol[r * c + r] > 0.0)) {
                return Err(Error::domain("stored posterior needs a positive Cholesky diagonal"));
            }
            store.value_mut(s.mu).copy_from_slice(&b.mean);
            let lower = store.value_mut(s.lower);
            for r in 0..c {
                for k in 0..r {
                    lower[packed(r, k)] = b.chol[r * c + k];
                }
            }
            let diag = store.value_mut(s.log_diag);
            for r in 0..c {
                diag[r] = b.chol[r * c + r].ln();
            }
        }
        Ok(())
    }

    pub fn noise(&self, store: &ParamStore) -> NoiseModel {
        NoiseModel { log_var: store.value(self.log_var)[0] }
    }

    pub fn set_noise(&self, store: &mut ParamStore, noise: NoiseModel) {
        store.value_mut(self.log_var)[0] = noise.log_var;
    }

    pub fn draw_eps(&self, rng: &mut SeededRng) -> Vec<Vec<f64>> {
        (0..self.post.len())
            .map(|_| {
                let mut e = vec![0.0; self.width()];
                rng.fill_normal(&mut e);
                e
            })
            .collect()
    }
}

/// Decomposition of a minibatch ELBO estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// `(N/B) Σ_batch Σ_points ln N(u | û, σ²)`
    pub log_likelihood: f64,
    pub kl: f64,
    pub elbo: f64,
}

/// Single-sample reparametrized ELBO on a minibatch, at fixed `ε`.
///
/// As an [`Objective`] the loss is `−ELBO / (N J)` with `J` the number of
/// output values per element, so its scale matches a per-point likelihood.
pub struct ElboObjective<'a> {
    pub model: &'a BayesianNetwork,
    pub prior: TimePrior,
    pub inputs: &'a [Field],
    pub targets: &'a [Field],
    pub dataset_size: usize,
    pub eps: Vec<Vec<f64>>,
}

impl ElboObjective<'_> {
    fn scale(&self) -> f64 {
        self.dataset_size as f64 / self.inputs.len() as f64
    }

    fn normalizer(&self) -> f64 {
        (self.dataset_size * self.targets[0].values().len()) as f64
    }

    fn check(&self) -> Result<()> {
        if self.inputs.is_empty() || self.inputs.len() != self.targets.len() {
            return Err(Error::shape("ELBO batch needs matching, non-empty inputs and targets"));
        }
        if self.dataset_size < self.inputs.len() {
            return Err(Error::config("dataset size smaller than batch"));
        }
        Ok(())
    }

    pub fn terms(&self, store: &ParamStore) -> Result<ElboTerms> {
        self.evaluate(store, None)
    }

    fn evaluate(&self, store: &ParamStore, out: Option<&mut GradBuffer>) -> Result<ElboTerms> {
        self.check()?;
        let mut local = out.is_some().then(|| store.grad_buffer());
        let mut grads = local.as_mut();
        let model = self.model;
        let post = model.posterior(store);
        let log_times = post.sample_log_times(&self.eps)?;
        let log_var = store.value(model.log_var)[0];
        let var = log_var.exp();
        let scale = self.scale();

        let mut ll = 0.0;
        let mut d_log_var = 0.0;
        let mut d_times = vec![vec![0.0; model.width()]; log_times.len()];
        for (a, u) in self.inputs.iter().zip(self.targets) {
            let (pred, cache) = model.net.forward(store, a, &log_times)?;
            if pred.values().len() != u.values().len() {
                return Err(Error::shape("target does not match network output"));
            }
            let mut sq = 0.0;
            for (p, t) in pred.values().iter().zip(u.values()) {
                sq += (t - p) * (t - p);
            }
            let j = u.values().len() as f64;
            ll += -0.5 * j * (LN_2PI + log_var) - sq / (2.0 * var);
            if let Some(g) = grads.as_deref_mut() {
                d_log_var += -0.5 * j + sq / (2.0 * var);
                // d ELBO / d û = scale (u − û) / σ²
                let d_out: Vec<f64> = pred.values().iter().zip(u.values()).map(|(p, t)| scale * (t - p) / var).collect();
                let dt = model.net.backward(store, &log_times, &cache, &d_out, g)?;
                for (acc, d) in d_times.iter_mut().zip(dt) {
                    for (a, b) in acc.iter_mut().zip(d) {
                        *a += b;
                    }
                }
            }
        }
        ll *= scale;
        let kl = kl_divergence(&post, &self.prior);
        let elbo = ll - kl;
        if !elbo.is_finite() {
            return Err(Error::NonFinite("ELBO".into()));
        }

        if let (Some(g), Some(out)) = (grads, out) {
            // everything accumulated in `g` is a gradient of +ELBO
            let c = model.width();
            let pvar = self.prior.std * self.prior.std;
            for ((slots, dt), (b, eps)) in model.post.iter().zip(&d_times).zip(post.blocks().iter().zip(&self.eps)) {
                let dmu = g.get_mut(slots.mu);
                for r in 0..c {
                    dmu[r] += dt[r] - (b.mean[r] - self.prior.mean) / pvar;
                }
                let dl = g.get_mut(slots.lower);
                for r in 0..c {
                    for k in 0..r {
                        dl[packed(r, k)] += dt[r] * eps[k] - b.chol[r * c + k] / pvar;
                    }
                }
                let dd = g.get_mut(slots.log_diag);
                for r in 0..c {
                    let l = b.chol[r * c + r];
                    dd[r] += dt[r] * eps[r] * l - (l * l / pvar - 1.0);
                }
            }
            g.get_mut(model.log_var)[0] += scale * d_log_var;
            g.scale(-1.0 / self.normalizer());
            out.add(g);
        }
        Ok(ElboTerms { log_likelihood: ll, kl, elbo })
    }
}

impl Objective for ElboObjective<'_> {
    fn loss(&self, store: &ParamStore) -> Result<f64> {
        Ok(-self.terms(store)?.elbo / self.normalizer())
    }

    fn loss_and_grad(&self, store: &ParamStore, grads: &mut GradBuffer) -> Result<f64> {
        Ok(-self.evaluate(store, Some(grads))?.elbo / self.normalizer())
    }
}
