use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::random_field::{sample_random_field, RandomFieldSpec};
use crate::error::{Error, Result};
use crate::rng::{stream, SeededRng};
use crate::spectral::{self, Field, Grid, ModeSet, SpectralPlan, FOUR_PI_SQ};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Heat,
    ScreenedPoisson,
    DarcyLite,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Heat => "heat",
            TaskKind::ScreenedPoisson => "screened-poisson",
            TaskKind::DarcyLite => "darcy-lite",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat" => Ok(TaskKind::Heat),
            "screened-poisson" => Ok(TaskKind::ScreenedPoisson),
            "darcy-lite" => Ok(TaskKind::DarcyLite),
            other => Err(Error::config(format!("unknown task `{other}` (heat | screened-poisson | darcy-lite)"))),
        }
    }
}

/// A synthetic operator-learning problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorTask {
    pub kind: TaskKind,
    pub dims: Vec<usize>,
    pub train: usize,
    pub test: usize,
    /// Input field distribution; for Darcy-lite this is the log-permeability.
    pub field: RandomFieldSpec,
    /// Heat horizon `T`.
    pub horizon: f64,
}

impl OperatorTask {
    /// Defaults: heat and screened Poisson in 1D, Darcy-lite in 2D.
    pub fn new(kind: TaskKind, n: usize, train: usize, test: usize) -> Self {
        let (dims, field) = match kind {
            TaskKind::DarcyLite => (vec![n, n], RandomFieldSpec { amplitude: 0.2, ..Default::default() }),
            _ => (vec![n], RandomFieldSpec::default()),
        };
        OperatorTask { kind, dims, train, test, field, horizon: 0.01 }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        self.field.validate(grid.ndim())?;
        self.field.modes(&grid)?.check(&grid)?;
        if self.kind == TaskKind::Heat && !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config(format!("heat horizon must be positive, got {}", self.horizon)));
        }
        if self.train == 0 {
            return Err(Error::config("need at least one training sample"));
        }
        Ok(())
    }
}

/// Heat semigroup at time `t`, exact on band-limited input.
pub fn heat_target(v0: &Field, t: f64) -> Result<Field> {
    let modes = ModeSet::full(v0.grid());
    let s = spectral::forward_fft(v0, &modes)?;
    spectral::inverse_fft(&spectral::diffuse(&s, &vec![t; v0.channels()])?, v0.grid())
}

/// Solves `(I − Δ) u = a` exactly in Fourier space.
pub fn screened_poisson(a: &Field) -> Result<Field> {
    let grid = a.grid();
    let plan = spectral::plan(grid, &ModeSet::full(grid))?;
    apply_multiplier(&plan, a, |s| 1.0 / (1.0 + FOUR_PI_SQ * s))
}

fn apply_multiplier(plan: &SpectralPlan, f: &Field, m: impl Fn(f64) -> f64) -> Result<Field> {
    let c = f.channels();
    let mut coef = vec![Complex64::new(0.0, 0.0); plan.num_modes() * c];
    plan.analyze(f.values(), c, &mut coef);
    for (k, chunk) in coef.chunks_exact_mut(c).enumerate() {
        let w = m(plan.sq_norms()[k]);
        chunk.iter_mut().for_each(|z| *z *= w);
    }
    let mut out = vec![0.0; f.values().len()];
    plan.synthesize(&coef, c, true, &mut out);
    Ok(Field::from_parts(f.grid().clone(), c, out))
}

/// Result of a Darcy-lite solve.
#[derive(Debug, Clone)]
pub struct DarcySolution {
    pub u: Field,
    pub iterations: usize,
    /// `‖f − A u‖ / ‖f‖` recomputed from the returned `u`.
    pub residual: f64,
}

/// `A u = −∇·(a ∇u) + u` with spectral derivatives and pointwise products.
pub struct DarcyOperator {
    plan: std::sync::Arc<SpectralPlan>,
    a: Vec<f64>,
    a_mean: f64,
}

impl DarcyOperator {
    pub fn new(a: &Field) -> Result<Self> {
        if a.channels() != 1 {
            return Err(Error::shape("permeability must be a single channel"));
        }
        if let Some(v) = a.values().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::domain(format!("permeability must be positive, got {v}")));
        }
        let grid = a.grid();
        let a_mean = a.values().iter().sum::<f64>() / a.values().len() as f64;
        Ok(DarcyOperator { plan: spectral::plan(grid, &ModeSet::full(grid))?, a: a.values().to_vec(), a_mean })
    }

    fn derivative(&self, coef: &[Complex64], j: usize, out: &mut [f64]) {
        let dk: Vec<Complex64> =
            coef.iter().enumerate().map(|(m, z)| z * Complex64::new(0.0, self.plan.deriv(m, j))).collect();
        self.plan.synthesize(&dk, 1, true, out);
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let n = u.len();
        let d = self.plan.grid().ndim();
        let mut coef = vec![Complex64::new(0.0, 0.0); self.plan.num_modes()];
        self.plan.analyze(u, 1, &mut coef);
        let mut out = u.to_vec();
        let mut flux = vec![0.0; n];
        let mut fcoef = vec![Complex64::new(0.0, 0.0); self.plan.num_modes()];
        let mut div = vec![0.0; n];
        for j in 0..d {
            self.derivative(&coef, j, &mut flux);
            flux.iter_mut().zip(&self.a).for_each(|(f, a)| *f *= a);
            self.plan.analyze(&flux, 1, &mut fcoef);
            self.derivative(&fcoef, j, &mut div);
            out.iter_mut().zip(&div).for_each(|(o, v)| *o -= v);
        }
        out
    }

    /// Constant-coefficient inverse `(1 − ā Δ)⁻¹` with `ā` the mean permeability.
    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        let mut coef = vec![Complex64::new(0.0, 0.0); self.plan.num_modes()];
        self.plan.analyze(r, 1, &mut coef);
        for (z, s) in coef.iter_mut().zip(self.plan.sq_norms()) {
            *z /= 1.0 + self.a_mean * FOUR_PI_SQ * s;
        }
        let mut out = vec![0.0; r.len()];
        self.plan.synthesize(&coef, 1, true, &mut out);
        out
    }

    pub fn residual(&self, u: &[f64], f: &[f64]) -> f64 {
        let au = self.apply(u);
        norm(&au.iter().zip(f).map(|(x, y)| y - x).collect::<Vec<_>>()) / norm(f)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Preconditioned conjugate gradients for `A u = f`, relative tolerance `tol`.
pub fn solve_darcy(a: &Field, f: &Field, tol: f64) -> Result<DarcySolution> {
    if a.grid() != f.grid() || f.channels() != 1 {
        return Err(Error::shape("forcing must be a single channel on the permeability grid"));
    }
    let op = DarcyOperator::new(a)?;
    let b = f.values();
    let b_norm = norm(b);
    let n = a.grid().len();
    if b_norm == 0.0 {
        return Ok(DarcySolution { u: Field::zeros(a.grid().clone(), 1), iterations: 0, residual: 0.0 });
    }
    let max_iter = 10 * a.grid().dims().iter().copied().max().unwrap_or(1);
    let mut x = op.precondition(b);
    let ax = op.apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut z = op.precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut it = 0;
    while norm(&r) / b_norm > tol {
        if it == max_iter {
            return Err(Error::Convergence(format!(
                "Darcy CG stalled at relative residual {:.3e} after {it} iterations (permeability range {:.3e}..{:.3e})",
                norm(&r) / b_norm,
                op.a.iter().cloned().fold(f64::INFINITY, f64::min),
                op.a.iter().cloned().fold(0.0, f64::max)
            )));
        }
        let ap = op.apply(&p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        z = op.precondition(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        it += 1;
    }
    let residual = op.residual(&x, b);
    Ok(DarcySolution { u: Field::new(a.grid().clone(), 1, x)?, iterations: it, residual })
}

/// Relative residual target for Darcy-lite solves.
pub const DARCY_TOLERANCE: f64 = 1e-10;

/// One input/target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Field,
    pub target: Field,
}

/// Generated dataset with its certification residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: OperatorTask,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Largest oracle residual over all samples (zero for exact targets).
    pub max_residual: f64,
}

/// Generates one sample from its own random stream.
pub fn generate_sample(task: &OperatorTask, rng: &mut SeededRng) -> Result<(Sample, f64)> {
    let grid = task.grid()?;
    let g = sample_random_field(&task.field, &grid, 1, rng)?;
    match task.kind {
        TaskKind::Heat => {
            let target = heat_target(&g, task.horizon)?;
            Ok((Sample { input: g, target }, 0.0))
        }
        TaskKind::ScreenedPoisson => {
            let target = screened_poisson(&g)?;
            Ok((Sample { input: g, target }, 0.0))
        }
        TaskKind::DarcyLite => {
            let a = Field::new(grid.clone(), 1, g.values().iter().map(|v| v.exp()).collect())?;
            // the permeability doubles as forcing, keeping the map translation-equivariant
            let sol = solve_darcy(&a, &a, DARCY_TOLERANCE)?;
            Ok((Sample { input: a, target: sol.u }, sol.residual))
        }
    }
}

/// Train and test splits drawn from disjoint per-sample streams.
pub fn generate(task: &OperatorTask, seed: u64) -> Result<Dataset> {
    task.validate()?;
    let mut max_residual: f64 = 0.0;
    let mut split = |base: u64, count: usize| -> Result<Vec<Sample>> {
        (0..count)
            .map(|i| {
                let mut rng = SeededRng::substream(seed, base << 40, i as u64);
                let (s, r) = generate_sample(task, &mut rng)?;
                max_residual = max_residual.max(r);
                Ok(s)
            })
            .collect()
    };
    let train = split(stream::TRAIN_DATA, task.train)?;
    let test = split(stream::TEST_DATA, task.test)?;
    Ok(Dataset { task: task.clone(), seed, train, test, max_residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn max_abs_diff(a: &Field, b: &Field) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn heat_cosine_example() {
        let g = Grid::uniform(1, 32).unwrap();
        let v = Field::from_fn(g.clone(), 1, |x, _| (TAU * x[0]).cos());
        let u = heat_target(&v, 0.01).unwrap();
        let expected = Field::from_fn(g, 1, |x, _| 0.6738254512314336 * (TAU * x[0]).cos());
        assert!(max_abs_diff(&u, &expected) < 1e-14);
    }

    #[test]
    fn heat_conserves_mass() {
        let g = Grid::uniform(2, 16).unwrap();
        let v = sample_random_field(&RandomFieldSpec::default(), &g, 1, &mut SeededRng::new(1, 0)).unwrap();
        let u = heat_target(&v, 0.05).unwrap();
        assert!((u.channel_means()[0] - v.channel_means()[0]).abs() < 1e-14);
        assert!(max_abs_diff(&heat_target(&v, 0.0).unwrap(), &v) < 1e-14);
    }

    #[test]
    fn screened_poisson_examples() {
        let g = Grid::uniform(1, 32).unwrap();
        let one = Field::from_fn(g.clone(), 1, |_, _| 1.0);
        assert!(max_abs_diff(&screened_poisson(&one).unwrap(), &one) < 1e-14);
        let c = Field::from_fn(g.clone(), 1, |x, _| (TAU * x[0]).cos());
        let u = screened_poisson(&c).unwrap();
        let k = 1.0 / (1.0 + FOUR_PI_SQ);
        assert!((k - 0.0247045).abs() < 5e-8);
        let expected = Field::from_fn(g, 1, |x, _| k * (TAU * x[0]).cos());
        assert!(max_abs_diff(&u, &expected) < 1e-15);
    }

    #[test]
    fn screened_poisson_residual() {
        let g = Grid::uniform(2, 32).unwrap();
        let a = sample_random_field(&RandomFieldSpec::default(), &g, 1, &mut SeededRng::new(2, 0)).unwrap();
        let u = screened_poisson(&a).unwrap();
        // u − Δu via the spectral Laplacian
        let plan = spectral::plan(&g, &ModeSet::full(&g)).unwrap();
        let lap = apply_multiplier(&plan, &u, |s| -FOUR_PI_SQ * s).unwrap();
        let res = u.values().iter().zip(lap.values()).zip(a.values()).map(|((u, l), a)| (u - l - a).abs()).fold(0.0, f64::max);
        let scale = a.values().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(res / scale <= 1e-10);
    }

    #[test]
    fn darcy_unit_permeability_is_screened_poisson() {
        let g = Grid::uniform(2, 16).unwrap();
        let a = Field::from_fn(g.clone(), 1, |_, _| 1.0);
        let f = cos_forcing(&g);
        let sol = solve_darcy(&a, &f, DARCY_TOLERANCE).unwrap();
        assert!(max_abs_diff(&sol.u, &screened_poisson(&f).unwrap()) < 1e-9);
    }

    fn cos_forcing(g: &Grid) -> Field {
        Field::from_fn(g.clone(), 1, |x, _| x.iter().map(|v| (TAU * v).cos()).sum())
    }

    #[test]
    fn darcy_is_certified_and_linear() {
        let g = Grid::uniform(2, 32).unwrap();
        let spec = RandomFieldSpec { amplitude: 0.2, ..Default::default() };
        let log_a = sample_random_field(&spec, &g, 1, &mut SeededRng::new(3, 0)).unwrap();
        let a = Field::new(g.clone(), 1, log_a.values().iter().map(|v| v.exp()).collect()).unwrap();
        let f = cos_forcing(&g);
        let sol = solve_darcy(&a, &f, DARCY_TOLERANCE).unwrap();
        assert!(sol.residual <= 1e-10, "{}", sol.residual);
        let f2 = Field::new(g, 1, f.values().iter().map(|v| 2.0 * v).collect()).unwrap();
        let sol2 = solve_darcy(&a, &f2, DARCY_TOLERANCE).unwrap();
        let scale = sol.u.values().iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (x, y) in sol.u.values().iter().zip(sol2.u.values()) {
            assert!((2.0 * x - y).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn darcy_operator_is_symmetric() {
        let g = Grid::uniform(2, 8).unwrap();
        let mut rng = SeededRng::new(4, 0);
        let a = Field::from_fn(g.clone(), 1, |x, _| 1.5 + (TAU * x[0]).sin() * 0.5);
        let op = DarcyOperator::new(&a).unwrap();
        let mut u = vec![0.0; g.len()];
        let mut v = vec![0.0; g.len()];
        rng.fill_normal(&mut u);
        rng.fill_normal(&mut v);
        let lhs = dot(&op.apply(&u), &v);
        let rhs = dot(&u, &op.apply(&v));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs());
        assert!(dot(&op.apply(&u), &u) > 0.0);
    }

    #[test]
    fn splits_are_disjoint_and_reproducible() {
        let task = OperatorTask::new(TaskKind::Heat, 32, 4, 3);
        let a = generate(&task, 7).unwrap();
        let b = generate(&task, 7).unwrap();
        assert_eq!(a, b);
        for s in &a.test {
            assert!(a.train.iter().all(|t| t.input != s.input));
        }
        assert_eq!((a.train.len(), a.test.len()), (4, 3));
    }

    #[test]
    fn task_names_round_trip() {
        for k in [TaskKind::Heat, TaskKind::ScreenedPoisson, TaskKind::DarcyLite] {
            assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
    }
}
