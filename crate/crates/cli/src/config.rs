//! Run configuration.
//!
//! A run is described by one JSON document. Every key has a default, unknown
//! keys are rejected, and command-line flags are applied on top before
//! validation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dinozaur_core::bayes::{BayesInit, TimePrior};
use dinozaur_core::data::{OperatorTask, RandomFieldSpec, TaskKind};
use dinozaur_core::operator::{BlockKind, NetworkSpec};
use dinozaur_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Grid points per axis.
    pub n: usize,
    /// Spatial dimension; defaults to 1 for heat and screened Poisson, 2 for
    /// Darcy-lite.
    pub ndim: Option<usize>,
    pub train: usize,
    pub test: usize,
    pub horizon: f64,
    /// Input random field; the task default when absent.
    pub field: Option<RandomFieldSpec>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { kind: TaskKind::Heat, n: 64, ndim: None, train: 256, test: 64, horizon: 0.01, field: None }
    }
}

impl TaskConfig {
    pub fn to_task(&self) -> OperatorTask {
        let mut task = OperatorTask::new(self.kind, self.n, self.train, self.test);
        if let Some(d) = self.ndim {
            task.dims = vec![self.n; d];
        }
        task.horizon = self.horizon;
        if let Some(f) = &self.field {
            task.field = f.clone();
        }
        task
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub width: usize,
    pub blocks: usize,
    /// Per axis, or one value for all axes. Defaults to `min(n/4, 16)`.
    pub kmax: Option<Vec<usize>>,
    pub block: BlockKind,
    /// Zero padding per side, every axis.
    pub padding: usize,
    pub lift_hidden: Option<usize>,
    pub proj_hidden: Option<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { width: 32, blocks: 4, kmax: None, block: BlockKind::Diffusion, padding: 0, lift_hidden: None, proj_hidden: None }
    }
}

impl NetworkConfig {
    pub fn to_spec(&self, dims: &[usize], in_channels: usize, out_channels: usize) -> Result<NetworkSpec> {
        let kmax = match &self.kmax {
            None => dims.iter().map(|&n| (n / 4).clamp(1, 16)).collect(),
            Some(k) if k.len() == 1 => vec![k[0]; dims.len()],
            Some(k) if k.len() == dims.len() => k.clone(),
            Some(k) => bail!("kmax has {} entries for a {}-dimensional grid", k.len(), dims.len()),
        };
        let mut spec = NetworkSpec::new(dims.to_vec(), kmax, self.width, self.blocks, in_channels, out_channels, self.block);
        spec.padding = vec![self.padding; dims.len()];
        if let Some(h) = self.lift_hidden {
            spec.lift_hidden = h;
        }
        if let Some(h) = self.proj_hidden {
            spec.proj_hidden = h;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BayesConfig {
    pub enabled: bool,
    pub prior: TimePrior,
    pub post_mean: f64,
    pub post_std: f64,
    pub log_var: f64,
    /// Posterior-predictive draws per test element.
    pub samples: usize,
}

impl Default for BayesConfig {
    fn default() -> Self {
        let init = BayesInit::default();
        BayesConfig {
            enabled: false,
            prior: init.prior,
            post_mean: init.post_mean,
            post_std: init.post_std,
            log_var: init.log_var,
            samples: 100,
        }
    }
}

impl BayesConfig {
    pub fn init(&self) -> BayesInit {
        BayesInit { prior: self.prior, post_mean: self.post_mean, post_std: self.post_std, log_var: self.log_var }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset archive read by `train`, `eval` and `sample`.
    pub data: Option<PathBuf>,
    /// Read by `eval` and `sample`; `train` resumes from it.
    pub checkpoint: Option<PathBuf>,
    pub task: TaskConfig,
    pub network: NetworkConfig,
    pub optim: TrainConfig,
    pub bayes: BayesConfig,
    /// Standardize inputs and targets with training-split statistics.
    pub normalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: None,
            checkpoint: None,
            task: TaskConfig::default(),
            network: NetworkConfig::default(),
            optim: TrainConfig::default(),
            bayes: BayesConfig::default(),
            normalize: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.to_task().validate()?;
        self.optim.validate()?;
        self.bayes.prior.validate()?;
        if self.network.width == 0 {
            bail!("network width must be positive");
        }
        if !(self.bayes.post_std > 0.0 && self.bayes.post_std.is_finite()) {
            bail!("initial posterior std must be positive");
        }
        if !self.bayes.post_mean.is_finite() || !self.bayes.log_var.is_finite() {
            bail!("posterior mean and noise log-variance must be finite");
        }
        if self.bayes.samples == 0 {
            bail!("need at least one posterior-predictive sample");
        }
        if self.bayes.enabled && !self.network.block.is_diffusion() {
            bail!("Bayesian training needs diffusion blocks");
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes the resolved config to `config.json` in the output directory.
    pub fn echo(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join("config.json"), self.to_json()?)?;
        Ok(())
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data.as_deref().context("no dataset given (use --data or the `data` key)")
    }

    pub fn checkpoint_path(&self) -> Result<&Path> {
        self.checkpoint.as_deref().context("no checkpoint given (use --checkpoint or the `checkpoint` key)")
    }
}
