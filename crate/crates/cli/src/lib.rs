//! Command-line driver for dataset generation, training, evaluation,
//! posterior sampling, parameter accounting and gradient checks.
//!
//! Every command reads an optional JSON [`RunConfig`], applies its flags on
//! top, validates the result and echoes it to `config.json` in the output
//! directory.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dinozaur_core::data::TaskKind;
use dinozaur_core::operator::BlockKind;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "dinozaur", version, about = "Diffusion-multiplier neural operators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override its keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct NetworkArgs {
    /// Channel width d_c
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Retained modes per axis, comma-separated, or one value for all axes
    #[arg(long, value_delimiter = ',')]
    pub kmax: Option<Vec<usize>>,
    /// diffusion | diffusion-no-grad | fno
    #[arg(long)]
    pub block: Option<BlockKind>,
    /// Zero padding per side
    #[arg(long)]
    pub padding: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset archive
    GenData {
        #[command(flatten)]
        common: Common,
        /// heat | screened-poisson | darcy-lite
        #[arg(long)]
        task: Option<TaskKind>,
        /// Grid points per axis
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        ndim: Option<usize>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Train a deterministic or Bayesian model
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Variational training of the diffusion times
        #[arg(long)]
        bayes: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Peak learning rate
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[command(flatten)]
        network: NetworkArgs,
    },
    /// Evaluate a checkpoint on a dataset's test split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Posterior-predictive draws per element
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Count parameters of a network spec
    Params {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        ndim: Option<usize>,
        /// Also count variational parameters
        #[arg(long)]
        bayes: bool,
        #[command(flatten)]
        network: NetworkArgs,
    },
    /// Finite-difference check of the analytic gradients on a tiny model
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bayes: bool,
        #[arg(long)]
        block: Option<BlockKind>,
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
    /// Draw posterior-predictive samples and export diffusion-time summaries
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn resolve(common: &Common, apply: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, common.seed);
    set(&mut cfg.out, common.out.clone());
    apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_network(cfg: &mut RunConfig, n: NetworkArgs) {
    set(&mut cfg.network.width, n.width);
    set(&mut cfg.network.blocks, n.blocks);
    if n.kmax.is_some() {
        cfg.network.kmax = n.kmax;
    }
    set(&mut cfg.network.block, n.block);
    set(&mut cfg.network.padding, n.padding);
}

fn resolve_inference(common: &Common, checkpoint: Option<PathBuf>, data: Option<PathBuf>, samples: Option<usize>) -> Result<RunConfig> {
    resolve(common, |c| {
        if checkpoint.is_some() {
            c.checkpoint = checkpoint;
        }
        if data.is_some() {
            c.data = data;
        }
        set(&mut c.bayes.samples, samples);
    })
}

/// Resolves the configuration for `command` and runs it. Gradient checks
/// that fail return exit code 1.
pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { common, task, n, ndim, train, test } => {
            let cfg = resolve(&common, |c| {
                set(&mut c.task.kind, task);
                set(&mut c.task.n, n);
                if ndim.is_some() {
                    c.task.ndim = ndim;
                }
                set(&mut c.task.train, train);
                set(&mut c.task.test, test);
            })?;
            commands::gen_data(&cfg)?;
        }
        Command::Train { common, data, checkpoint, bayes, epochs, lr, batch, network } => {
            let cfg = resolve(&common, |c| {
                if data.is_some() {
                    c.data = data;
                }
                if checkpoint.is_some() {
                    c.checkpoint = checkpoint;
                }
                c.bayes.enabled |= bayes;
                set(&mut c.optim.epochs, epochs);
                set(&mut c.optim.lr, lr);
                set(&mut c.optim.batch_size, batch);
                apply_network(c, network);
            })?;
            commands::train(&cfg)?;
        }
        Command::Eval { common, checkpoint, data, samples } => {
            commands::eval(&resolve_inference(&common, checkpoint, data, samples)?)?;
        }
        Command::Sample { common, checkpoint, data, samples } => {
            commands::sample(&resolve_inference(&common, checkpoint, data, samples)?)?;
        }
        Command::Params { common, task, n, ndim, bayes, network } => {
            let cfg = resolve(&common, |c| {
                set(&mut c.task.kind, task);
                set(&mut c.task.n, n);
                if ndim.is_some() {
                    c.task.ndim = ndim;
                }
                c.bayes.enabled |= bayes;
                apply_network(c, network);
            })?;
            commands::params(&cfg)?;
        }
        Command::Gradcheck { common, bayes, block, corrupt_adjoint } => {
            let cfg = resolve(&common, |c| {
                c.bayes.enabled |= bayes;
                set(&mut c.network.block, block);
            })?;
            let report = commands::gradcheck(&cfg, corrupt_adjoint)?;
            if !report.passed {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
