//! Training loops and evaluation.

use serde::{Deserialize, Serialize};

use crate::bayes::{
    kl_divergence, posterior_predictive, BayesianNetwork, ElboObjective, PredictiveModel, TimePrior,
};
use crate::data::{Dataset, StandardScaler};
use crate::error::{Error, Result};
use crate::metrics::{ElementPrediction, MetricReport};
use crate::nn::{adamw_step, one_cycle_lr, AdamWConfig, GradBuffer, Objective, OptimizerState, ParamStore};
use crate::operator::Network;
use crate::rng::{stream, RngState, SeededRng};
use crate::spectral::Field;

/// Mean squared error over a batch, averaged over elements and output values.
pub struct MseObjective<'a> {
    pub net: &'a Network,
    pub inputs: &'a [Field],
    pub targets: &'a [Field],
    /// Used when the network does not learn its times.
    pub log_times: Option<&'a [Vec<f64>]>,
}

impl MseObjective<'_> {
    fn times(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        match self.log_times {
            Some(t) => t.to_vec(),
            None => self.net.log_times(store),
        }
    }

    fn evaluate(&self, store: &ParamStore, mut grads: Option<&mut GradBuffer>) -> Result<f64> {
        if self.inputs.is_empty() || self.inputs.len() != self.targets.len() {
            return Err(Error::shape("MSE batch needs matching, non-empty inputs and targets"));
        }
        let times = self.times(store);
        let norm = (self.inputs.len() * self.targets[0].values().len()) as f64;
        let mut loss = 0.0;
        for (a, u) in self.inputs.iter().zip(self.targets) {
            let (pred, cache) = self.net.forward(store, a, &times)?;
            if pred.values().len() != u.values().len() {
                return Err(Error::shape("target does not match network output"));
            }
            let diff: Vec<f64> = pred.values().iter().zip(u.values()).map(|(p, t)| p - t).collect();
            loss += diff.iter().map(|d| d * d).sum::<f64>();
            if let Some(g) = grads.as_deref_mut() {
                let dout: Vec<f64> = diff.iter().map(|d| 2.0 * d / norm).collect();
                self.net.backward(store, &times, &cache, &dout, g)?;
            }
        }
        let loss = loss / norm;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok(loss)
    }
}

impl Objective for MseObjective<'_> {
    fn loss(&self, store: &ParamStore) -> Result<f64> {
        self.evaluate(store, None)
    }

    fn loss_and_grad(&self, store: &ParamStore, grads: &mut GradBuffer) -> Result<f64> {
        self.evaluate(store, Some(grads))
    }
}

/// Dataset split into scaled training pairs and raw test pairs.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub input_scaler: StandardScaler,
    pub target_scaler: StandardScaler,
    pub train_inputs: Vec<Field>,
    pub train_targets: Vec<Field>,
    pub test_inputs: Vec<Field>,
    /// Data units.
    pub test_targets: Vec<Field>,
}

impl PreparedData {
    /// Scalers fitted on the training split, or identities when `normalize`
    /// is false.
    pub fn new(ds: &Dataset, normalize: bool) -> Result<Self> {
        let (input_scaler, target_scaler) = if normalize {
            (ds.input_scaler()?, ds.target_scaler()?)
        } else {
            let s = ds.train.first().ok_or_else(|| Error::shape("dataset has no training samples"))?;
            (StandardScaler::identity(s.input.channels()), StandardScaler::identity(s.target.channels()))
        };
        Self::with_scalers(ds, input_scaler, target_scaler)
    }

    pub fn with_scalers(ds: &Dataset, input_scaler: StandardScaler, target_scaler: StandardScaler) -> Result<Self> {
        let scale = |fs: &mut dyn Iterator<Item = &Field>, s: &StandardScaler| fs.map(|f| s.apply(f)).collect::<Result<Vec<_>>>();
        Ok(PreparedData {
            train_inputs: scale(&mut ds.train.iter().map(|s| &s.input), &input_scaler)?,
            train_targets: scale(&mut ds.train.iter().map(|s| &s.target), &target_scaler)?,
            test_inputs: scale(&mut ds.test.iter().map(|s| &s.input), &input_scaler)?,
            test_targets: ds.test.iter().map(|s| s.target.clone()).collect(),
            input_scaler,
            target_scaler,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak of the one-cycle schedule.
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 100, batch_size: 16, lr: 5e-3, weight_decay: 1e-4 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum TrainModel {
    Deterministic(Network),
    Bayesian { model: BayesianNetwork, prior: TimePrior },
}

impl TrainModel {
    pub fn network(&self) -> &Network {
        match self {
            TrainModel::Deterministic(n) => n,
            TrainModel::Bayesian { model, .. } => model.network(),
        }
    }

    pub fn is_bayesian(&self) -> bool {
        matches!(self, TrainModel::Bayesian { .. })
    }

    /// Point-estimate log-times: learned values, or the posterior mean.
    pub fn point_log_times(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        match self {
            TrainModel::Deterministic(n) => n.log_times(store),
            TrainModel::Bayesian { model, .. } => model.posterior(store).mean_log_times(),
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean minibatch loss: MSE, or `−ELBO/(N J)` when Bayesian.
    pub train_loss: f64,
    /// At point-estimate times, data units; `None` without a test split.
    pub test_rl2: Option<f64>,
    /// Rate used by the last step of the epoch.
    pub lr: f64,
    pub elbo: Option<f64>,
    pub kl: Option<f64>,
    pub sigma2: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,train_loss,test_rl2,lr,elbo,kl,sigma2";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{:e},{},{:e},{},{},{}",
            self.epoch,
            self.train_loss,
            opt(self.test_rl2),
            self.lr,
            opt(self.elbo),
            opt(self.kl),
            opt(self.sigma2)
        )
    }
}

/// Epoch-at-a-time optimizer driver.
///
/// Minibatches come from a per-epoch shuffle of the training split; Bayesian
/// steps draw one `ε` per step. A failed epoch restores the parameters and
/// optimizer state from its start before returning the error.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: TrainModel,
    pub store: ParamStore,
    pub opt: OptimizerState,
    pub config: TrainConfig,
    pub data: PreparedData,
    pub history: Vec<EpochLog>,
    shuffle_rng: SeededRng,
    eps_rng: SeededRng,
    seed: u64,
}

impl Trainer {
    pub fn new(model: TrainModel, store: ParamStore, data: PreparedData, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if data.train_inputs.is_empty() {
            return Err(Error::config("no training samples"));
        }
        let opt = OptimizerState::new(
            AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..Default::default() },
            &store,
        );
        Ok(Trainer {
            model,
            store,
            opt,
            config,
            data,
            history: Vec::new(),
            shuffle_rng: SeededRng::new(seed, stream::SHUFFLE),
            eps_rng: SeededRng::new(seed, stream::EPSILON),
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Positions of the shuffle and `ε` streams.
    pub fn rng_states(&self) -> (RngState, RngState) {
        (self.shuffle_rng.state(self.seed), self.eps_rng.state(self.seed))
    }

    /// Continues from a saved optimizer state, history and stream positions.
    pub fn resume(&mut self, opt: OptimizerState, history: Vec<EpochLog>, shuffle: &RngState, eps: &RngState) -> Result<()> {
        if opt.m.len() != self.store.len() || history.len() > self.config.epochs {
            return Err(Error::config("saved training state does not match this run"));
        }
        self.opt = opt;
        self.history = history;
        self.shuffle_rng = SeededRng::from_state(shuffle);
        self.eps_rng = SeededRng::from_state(eps);
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.train_inputs.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.config.epochs
    }

    pub fn epoch(&self) -> usize {
        self.history.len()
    }

    pub fn is_done(&self) -> bool {
        self.epoch() >= self.config.epochs
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let saved = (self.store.clone(), self.opt.clone(), self.shuffle_rng.clone(), self.eps_rng.clone());
        match self.epoch_inner() {
            Ok(log) => {
                self.history.push(log);
                Ok(log)
            }
            Err(e) => {
                (self.store, self.opt, self.shuffle_rng, self.eps_rng) = saved;
                Err(e)
            }
        }
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let log = self.run_epoch()?;
            on_epoch(self, &log)?;
        }
        Ok(())
    }

    fn epoch_inner(&mut self) -> Result<EpochLog> {
        let n = self.data.train_inputs.len();
        let mut order: Vec<usize> = (0..n).collect();
        self.shuffle_rng.shuffle(&mut order);
        let total = self.total_steps();
        let mut step = self.epoch() * self.steps_per_epoch();
        let (mut loss_sum, mut elbo_sum, mut kl, mut lr) = (0.0, 0.0, 0.0, 0.0);
        let batches = order.chunks(self.config.batch_size).count();
        for batch in order.chunks(self.config.batch_size) {
            let inputs: Vec<Field> = batch.iter().map(|&i| self.data.train_inputs[i].clone()).collect();
            let targets: Vec<Field> = batch.iter().map(|&i| self.data.train_targets[i].clone()).collect();
            let mut grads = self.store.grad_buffer();
            let loss = match &self.model {
                TrainModel::Deterministic(net) => {
                    MseObjective { net, inputs: &inputs, targets: &targets, log_times: None }.loss_and_grad(&self.store, &mut grads)?
                }
                TrainModel::Bayesian { model, prior } => {
                    let obj = ElboObjective {
                        model,
                        prior: *prior,
                        inputs: &inputs,
                        targets: &targets,
                        dataset_size: n,
                        eps: model.draw_eps(&mut self.eps_rng),
                    };
                    let loss = obj.loss_and_grad(&self.store, &mut grads)?;
                    let terms = obj.terms(&self.store)?;
                    elbo_sum += terms.elbo;
                    loss
                }
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {}", self.epoch() + 1)));
            }
            loss_sum += loss;
            self.store.accumulate(&grads);
            lr = one_cycle_lr(step, total, self.config.lr);
            adamw_step(&mut self.store, &mut self.opt, lr)?;
            step += 1;
        }
        let (mut elbo, mut sigma2) = (None, None);
        if let TrainModel::Bayesian { model, prior } = &self.model {
            kl = kl_divergence(&model.posterior(&self.store), prior);
            elbo = Some(elbo_sum / batches as f64);
            sigma2 = Some(model.noise(&self.store).variance());
        }
        let test_rl2 = if self.data.test_inputs.is_empty() { None } else { Some(self.test_rl2()?) };
        Ok(EpochLog {
            epoch: self.epoch() + 1,
            train_loss: loss_sum / batches as f64,
            test_rl2,
            lr,
            elbo,
            kl: elbo.map(|_| kl),
            sigma2,
        })
    }

    /// Mean test RL₂ at point-estimate times.
    pub fn test_rl2(&self) -> Result<f64> {
        let times = self.model.point_log_times(&self.store);
        let elements = self
            .data
            .test_inputs
            .iter()
            .zip(&self.data.test_targets)
            .map(|(a, u)| {
                let pred = predict_point(self.model.network(), &self.store, &self.data.target_scaler, a, &times)?;
                ElementPrediction::deterministic(u.values().to_vec(), pred.into_values())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(crate::metrics::rl2(&elements)?.0)
    }
}

/// Forward pass on a scaled input, returned in data units.
pub fn predict_point(net: &Network, store: &ParamStore, target_scaler: &StandardScaler, input: &Field, log_times: &[Vec<f64>]) -> Result<Field> {
    target_scaler.invert(&net.predict(store, input, log_times)?)
}

/// Predictions for every test element, in data units.
///
/// Deterministic models give point predictions. Bayesian models draw
/// `samples` noise-free outputs `f_s` with `τ ~ q` and report the moments of
/// the Gaussian mixture they define: mean `f̄` and variance
/// `Var_s(f_s) + σ²`.
pub fn predict_test(model: &TrainModel, store: &ParamStore, data: &PreparedData, samples: usize, seed: u64) -> Result<Vec<ElementPrediction>> {
    data.test_inputs
        .iter()
        .zip(&data.test_targets)
        .enumerate()
        .map(|(i, (a, u))| match model {
            TrainModel::Deterministic(net) => {
                let pred = predict_point(net, store, &data.target_scaler, a, &net.log_times(store))?;
                ElementPrediction::deterministic(u.values().to_vec(), pred.into_values())
            }
            TrainModel::Bayesian { model, .. } => {
                let posterior = model.posterior(store);
                let pm = PredictiveModel { net: model.network(), store, posterior: &posterior, noise: None };
                let mut ps = posterior_predictive(&pm, a, samples, seed, i as u64)?;
                let var = model.noise(store).variance();
                ps.std.values_mut().iter_mut().for_each(|s| *s = (*s * *s + var).sqrt());
                let mean = data.target_scaler.invert(&ps.mean)?;
                let std = data.target_scaler.invert_std(&ps.std)?;
                ElementPrediction::new(u.values().to_vec(), mean.into_values(), std.into_values())
            }
        })
        .collect()
}

pub fn evaluate(model: &TrainModel, store: &ParamStore, data: &PreparedData, samples: usize, seed: u64) -> Result<MetricReport> {
    MetricReport::compute(&predict_test(model, store, data, samples, seed)?)
}
