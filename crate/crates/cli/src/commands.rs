use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use dinozaur_core::bayes::{
    moments, posterior_predictive, BayesianNetwork, BlockPosterior, ElboObjective, NoiseModel, PredictiveModel, VariationalPosterior,
};
use dinozaur_core::data::{generate, sample_random_field, save_field, Dataset, Manifest, RandomFieldSpec};
use dinozaur_core::metrics::MetricReport;
use dinozaur_core::nn::{gradcheck as check_gradients, GradcheckConfig, GradcheckReport, Objective, ParamStore};
use dinozaur_core::operator::{count_bayes_params, count_params, AdjointFault, Network, NetworkSpec, ParamTable};
use dinozaur_core::rng::{stream, SeededRng};
use dinozaur_core::spectral::Field;
use dinozaur_core::train::{evaluate, EpochLog, predict_point, MseObjective, PreparedData, TrainModel, Trainer, LOG_HEADER};
use dinozaur_core::Error as CoreError;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

/// Generates the configured task and writes the archive to `out`.
pub fn gen_data(cfg: &RunConfig) -> Result<Manifest> {
    let task = cfg.task.to_task();
    let ds = generate(&task, cfg.seed)?;
    let manifest = ds.save(&cfg.out)?;
    cfg.echo()?;
    println!(
        "{}: {} samples ({} train, {} test) on grid {:?} -> {}",
        task.kind,
        ds.train.len() + ds.test.len(),
        ds.train.len(),
        ds.test.len(),
        manifest.grid,
        cfg.out.display()
    );
    println!("max oracle residual {:.3e}", manifest.max_residual);
    Ok(manifest)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_dir()?;
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn channels(ds: &Dataset) -> Result<(Vec<usize>, usize, usize)> {
    let s = ds.train.first().or(ds.test.first()).context("dataset is empty")?;
    Ok((s.input.grid().dims().to_vec(), s.input.channels(), s.target.channels()))
}

/// Point estimate used to rank checkpoints: test RL₂, or training loss
/// without a test split.
fn score(row: &EpochLog) -> f64 {
    row.test_rl2.unwrap_or(row.train_loss)
}

/// Trains from scratch, or continues from `cfg.checkpoint` when set.
///
/// Writes `train_log.csv`, `last.dzck` after every epoch, `best.dzck` and
/// `final.dzck`. A non-finite loss stops training; `last.dzck` then holds
/// the last good state.
pub fn train(cfg: &RunConfig) -> Result<Trainer> {
    let ds = load_dataset(cfg)?;
    let (dims, cin, cout) = channels(&ds)?;
    let spec = cfg.network.to_spec(&dims, cin, cout)?;
    let resume = cfg.checkpoint.as_deref().map(Checkpoint::load).transpose()?;

    let mut rng = SeededRng::new(cfg.seed, stream::INIT);
    let (model, store) = if cfg.bayes.enabled {
        let (model, store) = BayesianNetwork::init(&spec, &mut rng, &cfg.bayes.init())?;
        (TrainModel::Bayesian { model, prior: cfg.bayes.prior }, store)
    } else {
        let (net, store) = Network::init(&spec, &mut rng, true)?;
        (TrainModel::Deterministic(net), store)
    };
    let data = match &resume {
        Some(ck) => PreparedData::with_scalers(&ds, ck.input_scaler.clone(), ck.target_scaler.clone())?,
        None => PreparedData::new(&ds, cfg.normalize)?,
    };
    let mut trainer = Trainer::new(model, store, data, cfg.optim, cfg.seed)?;
    if let Some(ck) = resume {
        ensure!(ck.spec == spec, "checkpoint network does not match the configured one");
        ensure!(ck.is_bayesian() == cfg.bayes.enabled, "checkpoint and config disagree on --bayes");
        let (opt, rng) = ck.optimizer.zip(ck.rng).context("checkpoint has no training state to resume")?;
        trainer.store = ck.store;
        trainer.resume(opt, ck.training.history, &rng.shuffle, &rng.eps)?;
    }

    cfg.echo()?;
    let out = &cfg.out;
    let mut log = BufWriter::new(fs::File::create(out.join("train_log.csv"))?);
    writeln!(log, "{LOG_HEADER}")?;
    for row in &trainer.history {
        writeln!(log, "{}", row.csv_row())?;
    }
    log.flush()?;

    let mut best = trainer.history.iter().map(score).fold(f64::INFINITY, f64::min);
    let epochs = trainer.config.epochs;
    let result = trainer.run(|t, row| {
        writeln!(log, "{}", row.csv_row())?;
        log.flush()?;
        let ck = Checkpoint::from_trainer(t);
        ck.save(&out.join("last.dzck")).map_err(io_err)?;
        let s = score(row);
        if s < best {
            best = s;
            ck.save(&out.join("best.dzck")).map_err(io_err)?;
        }
        let rl2 = row.test_rl2.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "-".into());
        match row.elbo {
            Some(elbo) => println!(
                "epoch {}/{epochs} loss {:.4e} test_rl2 {rl2} elbo {elbo:.4e} kl {:.4e} sigma2 {:.3e}",
                row.epoch,
                row.train_loss,
                row.kl.unwrap_or(f64::NAN),
                row.sigma2.unwrap_or(f64::NAN)
            ),
            None => println!("epoch {}/{epochs} loss {:.4e} test_rl2 {rl2}", row.epoch, row.train_loss),
        }
        Ok(())
    });
    if let Err(e) = result {
        Checkpoint::from_trainer(&trainer).save(&out.join("last.dzck"))?;
        return Err(anyhow::Error::new(e).context(format!(
            "training stopped at epoch {}; last good state saved to {}",
            trainer.epoch() + 1,
            out.join("last.dzck").display()
        )));
    }
    Checkpoint::from_trainer(&trainer).save(&out.join("final.dzck"))?;
    Ok(trainer)
}

fn io_err(e: anyhow::Error) -> CoreError {
    CoreError::Io(std::io::Error::other(format!("{e:#}")))
}

fn load_for_inference(cfg: &RunConfig) -> Result<(Checkpoint, TrainModel, PreparedData)> {
    let ck = Checkpoint::load(cfg.checkpoint_path()?)?;
    let ds = load_dataset(cfg)?;
    let (_, cin, cout) = channels(&ds)?;
    if cin != ck.spec.in_channels || cout != ck.spec.out_channels {
        bail!(
            "dataset has {cin} -> {cout} channels but the checkpoint expects {} -> {}",
            ck.spec.in_channels,
            ck.spec.out_channels
        );
    }
    if ds.test.is_empty() {
        bail!("dataset has no test split");
    }
    let data = PreparedData::with_scalers(&ds, ck.input_scaler.clone(), ck.target_scaler.clone())?;
    let model = ck.model()?;
    Ok((ck, model, data))
}

/// Test-split metrics: `report.json`, `elements.csv` and `calibration.csv`.
pub fn eval(cfg: &RunConfig) -> Result<MetricReport> {
    let (ck, model, data) = load_for_inference(cfg)?;
    let report = evaluate(&model, &ck.store, &data, cfg.bayes.samples, cfg.seed)?;
    cfg.echo()?;
    let mut json = report.to_json()?;
    json.push('\n');
    fs::write(cfg.out.join("report.json"), json)?;
    report.write_elements_csv(BufWriter::new(fs::File::create(cfg.out.join("elements.csv"))?))?;
    report.write_calibration_csv(BufWriter::new(fs::File::create(cfg.out.join("calibration.csv"))?))?;
    print!("rl2 {:.6e}", report.rl2);
    if let (Some(nll), Some(ma), Some(is)) = (report.nll, report.ma, report.is_score) {
        print!(" nll {nll:.6e} ma {ma:.6e} is {is:.6e} (S = {})", cfg.bayes.samples);
    }
    println!();
    if !report.rl2_excluded.is_empty() {
        println!("{} element(s) with zero-norm targets excluded from RL2", report.rl2_excluded.len());
    }
    Ok(report)
}

fn write_matrix(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Posterior-predictive draws for every test element, in data units.
///
/// Writes `samples/{element}/{draw}.dzf`, the pointwise `mean.dzf` and
/// `std.dzf` next to them, and the per-block posterior mean and standard
/// deviation of `ln τ` as `tau_log_mean.csv` and `tau_log_std.csv` (one row
/// per block, one column per channel, no header). Deterministic checkpoints
/// repeat the point prediction and report zero spread.
pub fn sample(cfg: &RunConfig) -> Result<()> {
    let (ck, model, data) = load_for_inference(cfg)?;
    let s = cfg.bayes.samples;
    let store = &ck.store;
    cfg.echo()?;
    let root = cfg.out.join("samples");
    for (i, a) in data.test_inputs.iter().enumerate() {
        let draws: Vec<Field> = match &model {
            TrainModel::Deterministic(net) => {
                let y = predict_point(net, store, &data.target_scaler, a, &net.log_times(store))?;
                vec![y; s]
            }
            TrainModel::Bayesian { model, .. } => {
                let post = model.posterior(store);
                let pm = PredictiveModel { net: model.network(), store, posterior: &post, noise: Some(model.noise(store)) };
                let ps = posterior_predictive(&pm, a, s, cfg.seed, i as u64)?;
                ps.samples.iter().map(|f| data.target_scaler.invert(f)).collect::<dinozaur_core::Result<_>>()?
            }
        };
        let dir = root.join(format!("{i:05}"));
        fs::create_dir_all(&dir)?;
        for (k, f) in draws.iter().enumerate() {
            save_field(&dir.join(format!("{k:05}.dzf")), f)?;
        }
        let (mean, std) = moments(&draws);
        save_field(&dir.join("mean.dzf"), &mean)?;
        save_field(&dir.join("std.dzf"), &std)?;
    }

    let (mean, std): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match &model {
        TrainModel::Deterministic(net) => {
            let t = net.log_times(store);
            let zeros = t.iter().map(|r| vec![0.0; r.len()]).collect();
            (t, zeros)
        }
        TrainModel::Bayesian { model, .. } => {
            let post = model.posterior(store);
            let c = post.width();
            let std = post
                .blocks()
                .iter()
                .map(|b| {
                    let cov = b.covariance();
                    (0..c).map(|r| cov[r * c + r].sqrt()).collect()
                })
                .collect();
            (post.mean_log_times(), std)
        }
    };
    write_matrix(&cfg.out.join("tau_log_mean.csv"), &mean)?;
    write_matrix(&cfg.out.join("tau_log_std.csv"), &std)?;
    println!("{} test elements x {s} draws -> {}", data.test_inputs.len(), root.display());
    Ok(())
}

/// Spec described by the configured task and network, single-channel in and
/// out.
pub fn params_spec(cfg: &RunConfig) -> Result<NetworkSpec> {
    cfg.network.to_spec(&cfg.task.to_task().dims, 1, 1)
}

/// Parameter accounting; the table also goes to `params.csv`.
pub fn params(cfg: &RunConfig) -> Result<ParamTable> {
    let spec = params_spec(cfg)?;
    let table = count_params(&spec)?;
    cfg.echo()?;
    let mut w = BufWriter::new(fs::File::create(cfg.out.join("params.csv"))?);
    writeln!(w, "component,tensor,count")?;
    println!("{:<12} {:<16} {:>12}", "component", "tensor", "count");
    for r in &table.rows {
        writeln!(w, "{},{},{}", r.component, r.tensor, r.count)?;
        println!("{:<12} {:<16} {:>12}", r.component, r.tensor, r.count);
    }
    w.flush()?;
    println!(
        "lifting {}  blocks {} ({} x {})  projection {}",
        table.lifting, table.blocks, spec.blocks, table.per_block, table.projection
    );
    println!("total {}", table.total);
    if cfg.bayes.enabled {
        println!("variational parameters {}", count_bayes_params(&spec));
    }
    Ok(table)
}

/// Spec used by `gradcheck`: 1D, 16 points, width 4, two blocks.
pub fn gradcheck_spec(cfg: &RunConfig) -> NetworkSpec {
    NetworkSpec::new(vec![16], vec![4], 4, 2, 1, 1, cfg.network.block)
}

/// Finite-difference check of the full model on two random pairs.
///
/// Bayesian checks perturb the posterior and noise away from their initial
/// values and hold `ε` fixed. `corrupt` scales the diffusion-time adjoint by
/// 1.5 and should fail.
pub fn gradcheck(cfg: &RunConfig, corrupt: bool) -> Result<GradcheckReport> {
    let spec = gradcheck_spec(cfg);
    let grid = spec.grid()?;
    let fault = corrupt.then_some(AdjointFault::ScaleTimeGradient(1.5));
    if corrupt && !spec.block.is_diffusion() {
        bail!("the corrupted adjoint needs diffusion blocks");
    }
    let mut rng = SeededRng::new(cfg.seed, stream::INIT);
    let field = RandomFieldSpec::default();
    let mut data_rng = SeededRng::new(cfg.seed, stream::TRAIN_DATA);
    let inputs: Vec<Field> = (0..2).map(|_| sample_random_field(&field, &grid, 1, &mut data_rng)).collect::<dinozaur_core::Result<_>>()?;
    let targets: Vec<Field> = (0..2).map(|_| sample_random_field(&field, &grid, 1, &mut data_rng)).collect::<dinozaur_core::Result<_>>()?;

    let report = if cfg.bayes.enabled {
        let (model, mut store) = BayesianNetwork::init(&spec, &mut rng, &cfg.bayes.init())?;
        let model = model.with_fault(fault);
        perturb_posterior(&model, &mut store, &mut rng)?;
        let eps = model.draw_eps(&mut SeededRng::new(cfg.seed, stream::EPSILON));
        let obj = ElboObjective { model: &model, prior: cfg.bayes.prior, inputs: &inputs, targets: &targets, dataset_size: 8, eps };
        run_check(&obj, &store)?
    } else {
        let (net, store) = Network::init(&spec, &mut rng, true)?;
        let net = net.with_fault(fault);
        let obj = MseObjective { net: &net, inputs: &inputs, targets: &targets, log_times: None };
        run_check(&obj, &store)?
    };
    cfg.echo()?;
    println!(
        "{} gradcheck ({}{}): {report}",
        spec.block,
        if cfg.bayes.enabled { "bayesian" } else { "deterministic" },
        if corrupt { ", corrupted adjoint" } else { "" }
    );
    Ok(report)
}

fn run_check(obj: &dyn Objective, store: &ParamStore) -> Result<GradcheckReport> {
    Ok(check_gradients(obj, store, &GradcheckConfig::default())?)
}

fn perturb_posterior(model: &BayesianNetwork, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
    let c = model.width();
    let blocks = (0..model.network().spec().blocks)
        .map(|_| {
            let mean = (0..c).map(|_| rng.uniform(-6.0, -2.0)).collect();
            let mut chol = vec![0.0; c * c];
            for i in 0..c {
                for k in 0..i {
                    chol[i * c + k] = rng.uniform(-0.5, 0.5);
                }
                chol[i * c + i] = rng.uniform(0.2, 1.5);
            }
            BlockPosterior { mean, chol }
        })
        .collect();
    model.set_posterior(store, &VariationalPosterior::new(c, blocks)?)?;
    model.set_noise(store, NoiseModel { log_var: rng.uniform(-2.0, -1.0) });
    Ok(())
}
