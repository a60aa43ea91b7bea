//! `DZCK` checkpoints.
//!
//! Layout: the magic `DZCK`, a little-endian `u64` manifest length, the
//! compact JSON manifest, then every tensor as little-endian `f64` values.
//! Parameters come first in store order, followed by the AdamW first and
//! second moments when present. Manifest offsets count bytes from the start
//! of the blob section and must be contiguous, so a loaded checkpoint saves
//! back to identical bytes.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use dinozaur_core::bayes::{BayesianNetwork, TimePrior};
use dinozaur_core::data::StandardScaler;
use dinozaur_core::nn::{AdamWConfig, OptimizerState, ParamStore};
use dinozaur_core::operator::{Network, NetworkSpec};
use dinozaur_core::rng::RngState;
use dinozaur_core::train::{EpochLog, TrainConfig, TrainModel, Trainer};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"DZCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    config: AdamWConfig,
    step: u64,
    m_offset: u64,
    v_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngStreams {
    pub shuffle: RngState,
    pub eps: RngState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epoch: usize,
    pub config: TrainConfig,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    spec: NetworkSpec,
    bayesian: bool,
    prior: Option<TimePrior>,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
    rng: Option<RngStreams>,
    input_scaler: StandardScaler,
    target_scaler: StandardScaler,
    training: TrainingMeta,
}

/// Everything needed to evaluate a model or continue training it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    /// Present exactly when the model is Bayesian.
    pub prior: Option<TimePrior>,
    pub store: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngStreams>,
    pub input_scaler: StandardScaler,
    pub target_scaler: StandardScaler,
    pub training: TrainingMeta,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let prior = match &t.model {
            TrainModel::Bayesian { prior, .. } => Some(*prior),
            TrainModel::Deterministic(_) => None,
        };
        let (shuffle, eps) = t.rng_states();
        Checkpoint {
            spec: t.model.network().spec().clone(),
            prior,
            store: t.store.clone(),
            optimizer: Some(t.opt.clone()),
            rng: Some(RngStreams { shuffle, eps }),
            input_scaler: t.data.input_scaler.clone(),
            target_scaler: t.data.target_scaler.clone(),
            training: TrainingMeta { seed: t.seed(), epoch: t.epoch(), config: t.config, history: t.history.clone() },
        }
    }

    pub fn is_bayesian(&self) -> bool {
        self.prior.is_some()
    }

    /// Rebinds the network described by the checkpoint to its store.
    pub fn model(&self) -> Result<TrainModel> {
        Ok(match self.prior {
            Some(prior) => TrainModel::Bayesian { model: BayesianNetwork::bind(&self.spec, &self.store)?, prior },
            None => TrainModel::Deterministic(Network::bind(&self.spec, &self.store, true)?),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob: Vec<u8> = Vec::with_capacity(self.store.num_scalars() * 8 * 3);
        let tensors: Vec<TensorEntry> = self
            .store
            .iter()
            .map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape.clone(), offset: put(&mut blob, &t.value), decay: t.decay })
            .collect();
        let optimizer = match &self.optimizer {
            Some(opt) => {
                ensure!(opt.m.len() == self.store.len() && opt.v.len() == self.store.len(), "optimizer state does not match the store");
                let m_offset = blob.len() as u64;
                opt.m.iter().for_each(|m| {
                    put(&mut blob, m);
                });
                let v_offset = blob.len() as u64;
                opt.v.iter().for_each(|v| {
                    put(&mut blob, v);
                });
                Some(OptimizerEntry { config: opt.config, step: opt.step, m_offset, v_offset })
            }
            None => None,
        };
        let manifest = Manifest {
            version: VERSION,
            spec: self.spec.clone(),
            bayesian: self.is_bayesian(),
            prior: self.prior,
            tensors,
            optimizer,
            rng: self.rng,
            input_scaler: self.input_scaler.clone(),
            target_scaler: self.target_scaler.clone(),
            training: self.training.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(12 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 12 && &bytes[..4] == MAGIC, "not a DZCK checkpoint");
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let len = usize::try_from(len).ok().filter(|&l| l <= bytes.len() - 12).context("truncated checkpoint manifest")?;
        let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + len]).context("malformed checkpoint manifest")?;
        if manifest.version != VERSION {
            bail!("unsupported checkpoint version {} (expected {VERSION})", manifest.version);
        }
        ensure!(manifest.bayesian == manifest.prior.is_some(), "checkpoint `bayesian` flag disagrees with its prior");
        let blob = &bytes[12 + len..];

        let mut r = BlobReader { blob, cursor: 0 };
        let mut store = ParamStore::new();
        for t in &manifest.tensors {
            let count = t.shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).context("tensor shape overflows")?;
            r.seek(t.offset)?;
            store.insert(t.name.clone(), t.shape.clone(), r.read(count)?, t.decay)?;
        }
        let optimizer = match &manifest.optimizer {
            Some(o) => {
                let mut section = |offset: u64| -> Result<Vec<Vec<f64>>> {
                    r.seek(offset)?;
                    store.iter().map(|(_, t)| r.read(t.len())).collect()
                };
                let m = section(o.m_offset)?;
                let v = section(o.v_offset)?;
                Some(OptimizerState { config: o.config, step: o.step, m, v })
            }
            None => None,
        };
        ensure!(r.cursor == blob.len(), "{} trailing bytes after checkpoint tensors", blob.len() - r.cursor);

        let ck = Checkpoint {
            spec: manifest.spec,
            prior: manifest.prior,
            store,
            optimizer,
            rng: manifest.rng,
            input_scaler: manifest.input_scaler,
            target_scaler: manifest.target_scaler,
            training: manifest.training,
        };
        ck.model().context("checkpoint tensors do not match its network spec")?;
        Ok(ck)
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("dzck.tmp");
        fs::write(&tmp, self.to_bytes()?).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
    }
}

/// Appends `values` and returns their byte offset.
fn put(blob: &mut Vec<u8>, values: &[f64]) -> u64 {
    let offset = blob.len() as u64;
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    offset
}

struct BlobReader<'a> {
    blob: &'a [u8],
    cursor: usize,
}

impl BlobReader<'_> {
    fn seek(&self, offset: u64) -> Result<()> {
        ensure!(offset == self.cursor as u64, "checkpoint offset {offset} is not contiguous (expected {})", self.cursor);
        Ok(())
    }

    fn read(&mut self, count: usize) -> Result<Vec<f64>> {
        let end = count
            .checked_mul(8)
            .and_then(|b| b.checked_add(self.cursor))
            .filter(|&e| e <= self.blob.len())
            .context("checkpoint blob too short")?;
        let values = self.blob[self.cursor..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        self.cursor = end;
        Ok(values)
    }
}
