use dinozaur_core::nn::{gradcheck, GradBuffer, GradcheckConfig, Objective, ParamStore};
use dinozaur_core::operator::block::{diffusion_backward, diffusion_forward, DiffusionParams};
use dinozaur_core::operator::{Activation, BlockKind, Network, NetworkSpec};
use dinozaur_core::rng::SeededRng;
use dinozaur_core::spectral::{self, Field, Grid, ModeSet};
use dinozaur_core::train::MseObjective;
use dinozaur_core::Result;

/// `sum(e^{τΔ} v)` per channel with `ln τ` as the only parameter.
struct DiffuseSum {
    v: Vec<f64>,
    c: usize,
    grid: Grid,
    modes: ModeSet,
    eye: Vec<f64>,
    zeros: Vec<f64>,
}

impl DiffuseSum {
    fn new(n: usize, c: usize) -> Self {
        let grid = Grid::uniform(1, n).unwrap();
        // mean-free input so the sum is driven by the decaying modes
        let v = Field::from_fn(grid.clone(), c, |x, ch| {
            let t = std::f64::consts::TAU * x[0];
            (t * (ch + 1) as f64).sin() + 0.3 * (2.0 * t).cos() + x[0] * x[0] - 1.0 / 3.0
        });
        let mut eye = vec![0.0; c * c];
        (0..c).for_each(|i| eye[i * c + i] = 1.0);
        DiffuseSum { v: v.into_values(), c, modes: ModeSet::new(vec![n / 2]).unwrap(), grid, eye, zeros: vec![0.0; c * c] }
    }

    fn params<'a>(&'a self, log_tau: &'a [f64]) -> DiffusionParams<'a> {
        DiffusionParams { w_skip: &self.zeros, bias: &self.zeros[..self.c], w_grad: None, w_mix: &self.eye, log_tau }
    }

    fn weighted_sum(&self, out: &[f64]) -> f64 {
        // weights break the symmetry that makes a plain sum τ-independent
        out.iter().enumerate().map(|(i, v)| v * (1.0 + (i % 7) as f64)).sum()
    }
}

impl Objective for DiffuseSum {
    fn loss(&self, store: &ParamStore) -> Result<f64> {
        let plan = spectral::plan(&self.grid, &self.modes)?;
        let (out, _) = diffusion_forward(&plan, &self.params(store.value(0)), &self.v, self.c, Activation::Identity)?;
        Ok(self.weighted_sum(&out))
    }

    fn loss_and_grad(&self, store: &ParamStore, grads: &mut GradBuffer) -> Result<f64> {
        let plan = spectral::plan(&self.grid, &self.modes)?;
        let p = self.params(store.value(0));
        let (out, cache) = diffusion_forward(&plan, &p, &self.v, self.c, Activation::Identity)?;
        let dout: Vec<f64> = (0..out.len()).map(|i| 1.0 + (i % 7) as f64).collect();
        let g = diffusion_backward(&plan, &p, &cache, &dout, self.c, Activation::Identity, 1.0);
        grads.get_mut(0).iter_mut().zip(&g.log_tau).for_each(|(a, b)| *a += b);
        Ok(self.weighted_sum(&out))
    }
}

#[test]
fn diffusion_time_gradient_matches_finite_differences() {
    let obj = DiffuseSum::new(32, 3);
    let mut store = ParamStore::new();
    store.insert("log_tau", vec![3], vec![(0.002f64).ln(), (0.01f64).ln(), (0.05f64).ln()], false).unwrap();
    let cfg = GradcheckConfig { tolerance: 1e-6, ..Default::default() };
    let report = gradcheck(&obj, &store, &cfg).unwrap();
    assert!(report.passed, "{report}");
    assert!(report.analytic.abs() > 1e-3, "gradient should be non-trivial: {report}");
}

#[test]
fn constant_path_leaves_skip_weights_stationary() {
    let spec = NetworkSpec::new(vec![16], vec![4], 4, 2, 1, 1, BlockKind::Diffusion);
    let (net, store) = Network::init(&spec, &mut SeededRng::new(4, 1), true).unwrap();
    let grid = spec.grid().unwrap();
    let zero = Field::zeros(grid.clone(), 1);
    let slot = |name: &str| store.index_of(name).unwrap();

    // targets equal to the constant output the model produces from a zero input
    let target = net.predict(&store, &zero, &net.log_times(&store)).unwrap();
    let inputs = [zero.clone()];
    let obj = MseObjective { net: &net, inputs: &inputs, targets: std::slice::from_ref(&target), log_times: None };
    let mut g = store.grad_buffer();
    let loss = obj.loss_and_grad(&store, &mut g).unwrap();
    assert_eq!(loss, 0.0);
    for i in 0..2 {
        assert!(g.get(slot(&format!("block.{i}.w_skip"))).iter().all(|&x| x == 0.0));
    }

    // with zero lifting biases the first block sees v ≡ 0, so its skip
    // weights stay stationary for any target
    let other = Field::from_fn(grid, 1, |x, _| (std::f64::consts::TAU * x[0]).sin());
    let obj = MseObjective { net: &net, inputs: &inputs, targets: std::slice::from_ref(&other), log_times: None };
    let mut g = store.grad_buffer();
    obj.loss_and_grad(&store, &mut g).unwrap();
    assert!(g.get(slot("block.0.w_skip")).iter().all(|&x| x == 0.0));
    assert!(g.get(slot("proj.1.bias")).iter().any(|&x| x != 0.0));
}

#[test]
fn single_affine_least_squares_gradient() {
    // ½‖Wx − y‖² has gradient (Wx − y) xᵀ
    use dinozaur_core::operator::pointwise::affine_backward;
    let w = [1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
    let x = [0.2, -1.0, 0.7];
    let y = [0.1, 0.4];
    let r: Vec<f64> = (0..2).map(|o| (0..3).map(|i| w[o * 3 + i] * x[i]).sum::<f64>() - y[o]).collect();
    let mut dw = [0.0; 6];
    let mut db = [0.0; 2];
    affine_backward(&w, &x, &r, 3, 2, &mut dw, &mut db);
    for o in 0..2 {
        for i in 0..3 {
            assert!((dw[o * 3 + i] - r[o] * x[i]).abs() < 1e-15);
        }
    }
}
