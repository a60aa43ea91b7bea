use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dinozaur_cli::{commands, Checkpoint, RunConfig};
use dinozaur_core::bayes::NoiseModel;
use dinozaur_core::data::{load_field, Dataset, TaskKind};
use dinozaur_core::train::{predict_point, PreparedData, TrainModel};

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn without_config(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    tree(dir).into_iter().filter(|(p, _)| p != Path::new("config.json")).collect()
}

fn heat_data(root: &Path, train: usize, test: usize) -> PathBuf {
    let mut cfg = RunConfig { seed: 7, out: root.join("data"), ..Default::default() };
    cfg.task.n = 32;
    cfg.task.train = train;
    cfg.task.test = test;
    commands::gen_data(&cfg).unwrap();
    cfg.out
}

fn small(root: &Path, data: &Path, out: &str) -> RunConfig {
    let mut cfg = RunConfig { seed: 7, out: root.join(out), data: Some(data.to_path_buf()), ..Default::default() };
    cfg.network.width = 8;
    cfg.network.blocks = 2;
    cfg.optim.epochs = 3;
    cfg
}

#[test]
fn gen_data_counts_and_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig { seed: 7, out: root.path().join("a"), ..Default::default() };
    cfg.task.n = 64;
    let m = commands::gen_data(&cfg).unwrap();
    assert_eq!(m.train.len() + m.test.len(), 320);
    assert_eq!(m.max_residual, 0.0);
    cfg.out = root.path().join("b");
    commands::gen_data(&cfg).unwrap();
    assert_eq!(without_config(&root.path().join("a")), without_config(&root.path().join("b")));
}

#[test]
fn darcy_archive_certifies_residual() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig { seed: 1, out: root.path().to_path_buf(), ..Default::default() };
    cfg.task.kind = TaskKind::DarcyLite;
    cfg.task.n = 16;
    cfg.task.train = 4;
    cfg.task.test = 2;
    let m = commands::gen_data(&cfg).unwrap();
    assert!(m.max_residual > 0.0 && m.max_residual <= 1e-10, "{}", m.max_residual);
}

#[test]
fn untrained_model_is_in_sanity_band_and_eval_is_repeatable() {
    let root = tempfile::tempdir().unwrap();
    let data = heat_data(root.path(), 32, 16);
    let mut cfg = small(root.path(), &data, "run");
    cfg.optim.epochs = 1;
    cfg.optim.lr = 1e-12;
    commands::train(&cfg).unwrap();

    let mut ev = RunConfig { seed: 3, data: Some(data), checkpoint: Some(cfg.out.join("final.dzck")), ..Default::default() };
    ev.out = root.path().join("e1");
    let a = commands::eval(&ev).unwrap();
    assert!((0.5..=2.0).contains(&a.rl2), "untrained RL2 {}", a.rl2);
    assert!(a.nll.is_none());
    ev.out = root.path().join("e2");
    commands::eval(&ev).unwrap();
    assert_eq!(without_config(&root.path().join("e1")), without_config(&root.path().join("e2")));
}

#[test]
fn training_log_has_documented_columns() {
    let root = tempfile::tempdir().unwrap();
    let data = heat_data(root.path(), 32, 8);
    let cfg = small(root.path(), &data, "run");
    commands::train(&cfg).unwrap();
    let log = fs::read_to_string(cfg.out.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), dinozaur_core::train::LOG_HEADER);
    assert_eq!(lines.count(), 3);
    for f in ["final.dzck", "best.dzck", "last.dzck", "config.json"] {
        assert!(cfg.out.join(f).exists(), "{f}");
    }
    let echoed = RunConfig::load(&cfg.out.join("config.json")).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn resume_extends_history_and_finished_runs_are_stable() {
    let root = tempfile::tempdir().unwrap();
    let data = heat_data(root.path(), 32, 8);
    let mut short = small(root.path(), &data, "short");
    short.optim.epochs = 2;
    commands::train(&short).unwrap();
    let before = Checkpoint::load(&short.out.join("final.dzck")).unwrap();

    let mut more = small(root.path(), &data, "more");
    more.optim.epochs = 4;
    more.checkpoint = Some(short.out.join("final.dzck"));
    let t = commands::train(&more).unwrap();
    assert_eq!(t.history.len(), 4);
    assert_eq!(t.history[..2], before.training.history[..]);
    let log = fs::read_to_string(more.out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    // a finished run resumes to the same bytes
    let mut again = small(root.path(), &data, "again");
    again.optim.epochs = 4;
    again.checkpoint = Some(more.out.join("final.dzck"));
    commands::train(&again).unwrap();
    assert_eq!(fs::read(more.out.join("final.dzck")).unwrap(), fs::read(again.out.join("final.dzck")).unwrap());
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let data = heat_data(root.path(), 32, 8);
    let mut cfg = small(root.path(), &data, "run");
    cfg.optim.lr = 1e300;
    let err = commands::train(&cfg).unwrap_err();
    assert!(format!("{err:#}").contains("last good state"), "{err:#}");
    let ck = Checkpoint::load(&cfg.out.join("last.dzck")).unwrap();
    assert!(ck.store.iter().all(|(_, t)| t.value.iter().all(|x| x.is_finite())));
    assert!(!cfg.out.join("final.dzck").exists());
}

#[test]
fn collapsed_posterior_sample_is_deterministic_output() {
    let root = tempfile::tempdir().unwrap();
    let data = heat_data(root.path(), 32, 4);
    let mut cfg = small(root.path(), &data, "run");
    cfg.bayes.enabled = true;
    commands::train(&cfg).unwrap();

    let mut ck = Checkpoint::load(&cfg.out.join("final.dzck")).unwrap();
    let TrainModel::Bayesian { model, .. } = ck.model().unwrap() else { panic!("expected a Bayesian checkpoint") };
    // L = 0 is ln 0 on the stored log-diagonal
    for (name, t) in ck.store.iter_mut() {
        if name.ends_with("chol_lower") {
            t.value.fill(0.0);
        } else if name.ends_with("chol_log_diag") {
            t.value.fill(f64::NEG_INFINITY);
        }
    }
    let flat = model.posterior(&ck.store);
    assert!(flat.blocks().iter().all(|b| b.chol.iter().all(|&x| x == 0.0)));
    model.set_noise(&mut ck.store, NoiseModel::from_std(0.0));
    ck.save(&root.path().join("flat.dzck")).unwrap();

    let mut s = RunConfig { seed: 5, out: root.path().join("s"), data: Some(data.clone()), ..Default::default() };
    s.checkpoint = Some(root.path().join("flat.dzck"));
    s.bayes.samples = 1;
    commands::sample(&s).unwrap();

    let ds = Dataset::load(&data).unwrap();
    let prepared = PreparedData::with_scalers(&ds, ck.input_scaler.clone(), ck.target_scaler.clone()).unwrap();
    for (i, a) in prepared.test_inputs.iter().enumerate() {
        let want = predict_point(model.network(), &ck.store, &ck.target_scaler, a, &flat.mean_log_times()).unwrap();
        let dir = s.out.join(format!("samples/{i:05}"));
        let got = load_field(&dir.join("00000.dzf")).unwrap();
        let scale = want.values().iter().fold(1e-300f64, |m, x| m.max(x.abs()));
        for (x, y) in got.values().iter().zip(want.values()) {
            assert!((x - y).abs() <= 1e-12 * scale);
        }
        assert!(load_field(&dir.join("std.dzf")).unwrap().values().iter().all(|&v| v == 0.0));
    }

    // M rows x d_c columns of finite values
    for f in ["tau_log_mean.csv", "tau_log_std.csv"] {
        let text = fs::read_to_string(s.out.join(f)).unwrap();
        let rows: Vec<Vec<f64>> = text.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.len() == 8 && r.iter().all(|v| v.is_finite())));
    }
}

#[test]
fn bayesian_training_raises_the_elbo() {
    let root = tempfile::tempdir().unwrap();
    let data = heat_data(root.path(), 64, 16);
    let mut cfg = small(root.path(), &data, "run");
    cfg.bayes.enabled = true;
    cfg.optim.epochs = 40;
    cfg.optim.lr = 1e-2;
    let t = commands::train(&cfg).unwrap();
    let elbo: Vec<f64> = t.history.iter().map(|r| r.elbo.unwrap()).collect();
    assert!(t.history.iter().all(|r| r.kl.unwrap().is_finite() && r.kl.unwrap() >= 0.0));

    // noise floor: spread of epoch-to-epoch changes over the last quarter
    let tail = &elbo[elbo.len() * 3 / 4..];
    let steps: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).collect();
    let mean = steps.iter().sum::<f64>() / steps.len() as f64;
    let floor = (steps.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / steps.len() as f64).sqrt();
    let gain = elbo.last().unwrap() - elbo[0];
    assert!(gain >= 10.0 * floor && gain > 0.0, "gain {gain:.3e}, floor {floor:.3e}");
}

#[test]
fn params_width_sweep() {
    let root = tempfile::tempdir().unwrap();
    let mut totals = Vec::new();
    for w in [16, 32, 64] {
        let mut cfg = RunConfig { out: root.path().join(format!("w{w}")), ..Default::default() };
        cfg.network.width = w;
        cfg.network.blocks = 1;
        totals.push(commands::params(&cfg).unwrap().blocks);
    }
    assert_eq!(totals, [1056, 4160, 16512]);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dinozaur"))
}

#[test]
fn flags_override_config_and_unknown_keys_fail() {
    let root = tempfile::tempdir().unwrap();
    fs::write(root.path().join("run.json"), r#"{"seed": 11, "task": {"n": 16, "train": 2, "test": 1}, "network": {"width": 4}}"#).unwrap();
    let out = bin()
        .args(["params", "--config", "run.json", "--width", "6", "--out", "p"])
        .current_dir(root.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let echoed = RunConfig::load(&root.path().join("p/config.json")).unwrap();
    assert_eq!((echoed.seed, echoed.task.n, echoed.network.width), (11, 16, 6));

    fs::write(root.path().join("bad.json"), r#"{"seeed": 1}"#).unwrap();
    let out = bin().args(["params", "--config", "bad.json", "--out", "q"]).current_dir(root.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
    assert!(!root.path().join("q").exists());
}

#[test]
fn gradcheck_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let ok = bin().args(["gradcheck", "--out", "g"]).current_dir(root.path()).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    let bad = bin().args(["gradcheck", "--corrupt-adjoint", "--out", "g"]).current_dir(root.path()).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("log_tau"));
}
