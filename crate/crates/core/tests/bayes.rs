use dinozaur_core::bayes::{
    kl_divergence, posterior_predictive, BayesInit, BayesianNetwork, BlockPosterior, ElboObjective, NoiseModel,
    PredictiveModel, TimePrior, VariationalPosterior,
};
use dinozaur_core::nn::{gradcheck, GradcheckConfig, Objective};
use dinozaur_core::operator::{BlockKind, NetworkSpec};
use dinozaur_core::rng::SeededRng;
use dinozaur_core::{Field, Grid};

fn wave(grid: &Grid, phase: f64) -> Field {
    Field::from_fn(grid.clone(), 1, |x, _| {
        let t = std::f64::consts::TAU * x[0];
        (t + phase).sin() + 0.4 * (2.0 * t - phase).cos()
    })
}

/// ln N(x; μ, LLᵀ) by forward substitution.
fn log_gauss(x: &[f64], b: &BlockPosterior) -> f64 {
    let c = x.len();
    let mut z = vec![0.0; c];
    for i in 0..c {
        let mut s = x[i] - b.mean[i];
        for k in 0..i {
            s -= b.chol[i * c + k] * z[k];
        }
        z[i] = s / b.chol[i * c + i];
    }
    let logdet: f64 = (0..c).map(|i| b.chol[i * c + i].ln()).sum();
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - logdet - 0.5 * c as f64 * (2.0 * std::f64::consts::PI).ln()
}

fn random_posterior(rng: &mut SeededRng, blocks: usize, c: usize) -> VariationalPosterior {
    let bs = (0..blocks)
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
    VariationalPosterior::new(c, bs).unwrap()
}

#[test]
fn sample_mean_matches_location() {
    let post = VariationalPosterior::isotropic(1, 3, 0.0, 1.0);
    let mut rng = SeededRng::new(11, 0);
    let n = 100_000;
    let mut sum = [0.0; 3];
    for _ in 0..n {
        let t = post.sample_log_times(&post.draw_eps(&mut rng)).unwrap();
        for (s, v) in sum.iter_mut().zip(&t[0]) {
            *s += v;
        }
    }
    for s in sum {
        assert!((s / n as f64).abs() < 3.0 / (n as f64).sqrt());
    }
}

#[test]
fn sample_covariance_matches_factor() {
    let b = BlockPosterior { mean: vec![1.0, -2.0], chol: vec![1.0, 0.0, 0.5, 0.8] };
    let post = VariationalPosterior::new(2, vec![b.clone()]).unwrap();
    let mut rng = SeededRng::new(12, 0);
    let n = 100_000;
    let xs: Vec<Vec<f64>> = (0..n).map(|_| post.sample_log_times(&post.draw_eps(&mut rng)).unwrap().remove(0)).collect();
    let mean: Vec<f64> = (0..2).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n as f64).collect();
    let expected = b.covariance();
    for i in 0..2 {
        for j in 0..2 {
            let cov = xs.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (n - 1) as f64;
            let e = expected[i * 2 + j];
            assert!((cov - e).abs() <= 0.05 * e.abs(), "({i},{j}) {cov} vs {e}");
        }
    }
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = SeededRng::new(13, 0);
    let post = random_posterior(&mut rng, 2, 3);
    let prior = TimePrior::new(0.01f64.ln(), 1.3).unwrap();
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let t = post.sample_log_times(&post.draw_eps(&mut rng)).unwrap();
        for (x, b) in t.iter().zip(post.blocks()) {
            let lq = log_gauss(x, b);
            let lp: f64 = x
                .iter()
                .map(|v| -0.5 * ((v - prior.mean) / prior.std).powi(2) - prior.std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
                .sum();
            acc += lq - lp;
        }
    }
    let mc = acc / n as f64;
    let kl = kl_divergence(&post, &prior);
    assert!((mc - kl).abs() <= 0.01 * kl, "closed form {kl}, Monte Carlo {mc}");
}

#[test]
fn kl_is_nonnegative() {
    let mut rng = SeededRng::new(14, 0);
    let prior = TimePrior::default();
    for _ in 0..200 {
        let post = random_posterior(&mut rng, 3, 4);
        assert!(kl_divergence(&post, &prior) >= 0.0);
    }
}

fn tiny(width: usize, block: BlockKind) -> NetworkSpec {
    NetworkSpec::new(vec![16], vec![4], width, 2, 1, 1, block)
}

fn elbo_gradcheck(block: BlockKind) {
    let spec = tiny(4, block);
    let mut rng = SeededRng::new(5, 1);
    let (model, mut store) = BayesianNetwork::init(&spec, &mut rng, &BayesInit::default()).unwrap();
    // move away from the symmetric initial point so every coordinate matters
    let post = random_posterior(&mut rng, 2, 4);
    model.set_posterior(&mut store, &post).unwrap();
    model.set_noise(&mut store, NoiseModel { log_var: -1.5 });
    let grid = spec.grid().unwrap();
    let inputs = vec![wave(&grid, 0.0), wave(&grid, 1.1)];
    let targets = vec![wave(&grid, 0.3), wave(&grid, 2.0)];
    let eps = model.draw_eps(&mut rng);
    let obj = ElboObjective { model: &model, prior: TimePrior::default(), inputs: &inputs, targets: &targets, dataset_size: 10, eps };
    let report = gradcheck(&obj, &store, &GradcheckConfig::default()).unwrap();
    assert!(report.passed, "{report}");
}

#[test]
fn elbo_gradients_with_gradient_features() {
    elbo_gradcheck(BlockKind::Diffusion);
}

#[test]
fn elbo_gradients_without_gradient_features() {
    elbo_gradcheck(BlockKind::DiffusionNoGrad);
}

#[test]
fn elbo_matches_direct_evaluation() {
    let spec = NetworkSpec::new(vec![8], vec![2], 1, 1, 1, 1, BlockKind::Diffusion);
    let mut rng = SeededRng::new(6, 1);
    let init = BayesInit { post_mean: -3.0, post_std: 0.7, log_var: -2.0, ..BayesInit::default() };
    let (model, store) = BayesianNetwork::init(&spec, &mut rng, &init).unwrap();
    let grid = spec.grid().unwrap();
    let a = vec![wave(&grid, 0.5)];
    let u = vec![wave(&grid, 0.9)];
    let eps = vec![vec![0.37]];
    let prior = TimePrior::new(-4.0, 1.5).unwrap();
    let obj = ElboObjective { model: &model, prior, inputs: &a, targets: &u, dataset_size: 1, eps };
    let terms = obj.terms(&store).unwrap();

    let log_tau = -3.0 + 0.7 * 0.37;
    let pred = model.network().predict(&store, &a[0], &[vec![log_tau]]).unwrap();
    let var = (-2.0f64).exp();
    let ll: f64 = pred
        .values()
        .iter()
        .zip(u[0].values())
        .map(|(p, t)| ((-(t - p).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()).ln())
        .sum();
    let kl = (1.5f64 / 0.7).ln() + (0.49 + 1.0) / (2.0 * 2.25) - 0.5;
    assert!((terms.log_likelihood - ll).abs() < 1e-10 * ll.abs().max(1.0));
    assert!((terms.kl - kl).abs() < 1e-10);
    assert!((terms.elbo - (ll - kl)).abs() < 1e-10 * ll.abs().max(1.0));
}

#[test]
fn perfect_fit_at_prior_has_zero_elbo() {
    let spec = tiny(2, BlockKind::Diffusion);
    let mut rng = SeededRng::new(8, 1);
    let prior = TimePrior::default();
    let init = BayesInit { prior, post_mean: prior.mean, post_std: prior.std, log_var: -(2.0 * std::f64::consts::PI).ln() };
    let (model, store) = BayesianNetwork::init(&spec, &mut rng, &init).unwrap();
    let grid = spec.grid().unwrap();
    let a = vec![wave(&grid, 0.2)];
    let eps = model.draw_eps(&mut rng);
    let times = model.posterior(&store).sample_log_times(&eps).unwrap();
    let u = vec![model.network().predict(&store, &a[0], &times).unwrap()];
    let obj = ElboObjective { model: &model, prior, inputs: &a, targets: &u, dataset_size: 5, eps };
    let t = obj.terms(&store).unwrap();
    assert!(t.elbo.abs() < 1e-12, "{t:?}");
    assert!(obj.loss(&store).unwrap().abs() < 1e-12);
}

fn degenerate(c: usize, blocks: usize, mean: f64) -> VariationalPosterior {
    VariationalPosterior::new(c, vec![BlockPosterior { mean: vec![mean; c], chol: vec![0.0; c * c] }; blocks]).unwrap()
}

#[test]
fn predictive_collapses_without_uncertainty() {
    let spec = tiny(4, BlockKind::Diffusion);
    let mut rng = SeededRng::new(9, 1);
    let (model, store) = BayesianNetwork::init(&spec, &mut rng, &BayesInit::default()).unwrap();
    let post = degenerate(4, 2, -4.0);
    let a = wave(&spec.grid().unwrap(), 0.1);
    let pm = PredictiveModel { net: model.network(), store: &store, posterior: &post, noise: None };
    let pred = posterior_predictive(&pm, &a, 7, 3, 0).unwrap();
    let det = model.network().predict(&store, &a, &post.mean_log_times()).unwrap();
    for s in pred.samples.iter().chain([&pred.mean]) {
        for (x, y) in s.values().iter().zip(det.values()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
    assert!(pred.std.values().iter().all(|&s| s <= 1e-12));
}

#[test]
fn predictive_variance_approaches_noise() {
    let spec = tiny(2, BlockKind::Diffusion);
    let mut rng = SeededRng::new(10, 1);
    let (model, store) = BayesianNetwork::init(&spec, &mut rng, &BayesInit::default()).unwrap();
    let post = degenerate(2, 2, -4.0);
    let sigma = 0.3;
    let pm = PredictiveModel { net: model.network(), store: &store, posterior: &post, noise: Some(NoiseModel::from_std(sigma)) };
    let s = 10_000;
    let pred = posterior_predictive(&pm, &wave(&spec.grid().unwrap(), 0.0), s, 4, 0).unwrap();
    let var = sigma * sigma;
    let se = var * (2.0 / s as f64).sqrt();
    for sd in pred.std.values() {
        assert!((sd * sd - var).abs() < 3.0 * se, "{} vs {var}", sd * sd);
    }
}

#[test]
fn predictive_is_deterministic_and_order_free() {
    let spec = tiny(2, BlockKind::Diffusion);
    let mut rng = SeededRng::new(15, 1);
    let (model, store) = BayesianNetwork::init(&spec, &mut rng, &BayesInit::default()).unwrap();
    let post = model.posterior(&store);
    let pm = PredictiveModel { net: model.network(), store: &store, posterior: &post, noise: Some(model.noise(&store)) };
    let a = wave(&spec.grid().unwrap(), 0.0);
    let x = posterior_predictive(&pm, &a, 5, 21, 3).unwrap();
    let y = posterior_predictive(&pm, &a, 5, 21, 3).unwrap();
    assert_eq!(x.samples, y.samples);
    let z = posterior_predictive(&pm, &a, 5, 21, 4).unwrap();
    assert_ne!(x.samples, z.samples);
}

#[test]
fn adjacent_predictions_are_correlated() {
    let spec = NetworkSpec::new(vec![32], vec![8], 1, 1, 1, 1, BlockKind::Diffusion);
    let mut rng = SeededRng::new(16, 1);
    let init = BayesInit { post_mean: -4.0, post_std: 1.0, ..BayesInit::default() };
    let (model, store) = BayesianNetwork::init(&spec, &mut rng, &init).unwrap();
    let post = model.posterior(&store);
    let pm = PredictiveModel { net: model.network(), store: &store, posterior: &post, noise: None };
    let s = 500;
    let pred = posterior_predictive(&pm, &wave(&spec.grid().unwrap(), 0.4), s, 5, 0).unwrap();
    let n = 32;
    let mut best: f64 = 0.0;
    for p in 0..n {
        let q = (p + 1) % n;
        let xs: Vec<f64> = pred.samples.iter().map(|f| f.values()[p]).collect();
        let ys: Vec<f64> = pred.samples.iter().map(|f| f.values()[q]).collect();
        best = best.max(pearson(&xs, &ys).abs());
    }
    assert!(best > 0.9, "max adjacent correlation {best}");
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}
