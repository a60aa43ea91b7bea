//! Periodic grids and truncated real Fourier transforms on the unit torus.
//!
//! Conventions used throughout the crate:
//!
//! - The domain is `[0, 1)^d`; grid point `m` sits at `x_j = m_j / n_j`.
//! - Fields are stored row-major over the spatial multi-index with channels
//!   as the fastest axis.
//! - The forward transform is normalised, `F[v](k) = (1/N) Σ_x v(x) e^{-i2πk·x}`,
//!   so coefficients do not depend on the sampling resolution.
//! - Only a truncated half-spectrum is kept: `|k_j| <= kmax_j - 1` for the
//!   leading dimensions and `0 <= k_d <= kmax_d - 1` for the last one. When
//!   `2 kmax_j == n_j` the Nyquist frequency of that axis is kept as well, which
//!   makes `ModeSet::full` an exact round trip.
//! - Synthesis returns `Σ_k w_k Re(F(k) e^{i2πk·x})` with `w_k = 2` for last-axis
//!   frequencies strictly between zero and Nyquist and `w_k = 1` otherwise. This
//!   is the Hermitian completion of the half-spectrum and is real-linear in the
//!   coefficients, so its adjoint is a scaled analysis.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

pub use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FOUR_PI_SQ: f64 = 4.0 * PI * PI;

/// Heat-kernel multiplier `exp(-4π² s τ)` for a mode with squared norm `s`.
#[inline]
pub fn heat_factor(sq_norm: f64, tau: f64) -> f64 {
    (-FOUR_PI_SQ * sq_norm * tau).exp()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    dims: Vec<usize>,
}

impl Grid {
    /// Every axis needs at least four points. Odd sizes are accepted so that
    /// padded grids (e.g. 241 + 2·15) remain representable.
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::config("grid needs at least one dimension"));
        }
        if let Some(n) = dims.iter().find(|&&n| n < 4) {
            return Err(Error::config(format!("grid axis has {n} points, need at least 4")));
        }
        Ok(Grid { dims })
    }

    pub fn uniform(ndim: usize, n: usize) -> Result<Self> {
        Self::new(vec![n; ndim])
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Physical coordinates of the point with flat index `flat`.
    pub fn coords(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.ndim()];
        let mut rem = flat;
        for j in (0..self.ndim()).rev() {
            let n = self.dims[j];
            out[j] = (rem % n) as f64 / n as f64;
            rem /= n;
        }
        out
    }

    /// Multi-index of the point with flat index `flat`.
    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.ndim()];
        let mut rem = flat;
        for j in (0..self.ndim()).rev() {
            out[j] = rem % self.dims[j];
            rem /= self.dims[j];
        }
        out
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &n)| acc * n + i)
    }
}

/// Per-axis truncation counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModeSet {
    kmax: Vec<usize>,
}

impl ModeSet {
    pub fn new(kmax: Vec<usize>) -> Result<Self> {
        if kmax.is_empty() || kmax.contains(&0) {
            return Err(Error::config("kmax entries must be at least 1"));
        }
        Ok(ModeSet { kmax })
    }

    /// Every frequency the grid can represent.
    pub fn full(grid: &Grid) -> Self {
        ModeSet {
            kmax: grid.dims().iter().map(|&n| n.div_ceil(2)).collect(),
        }
    }

    pub fn kmax(&self) -> &[usize] {
        &self.kmax
    }

    pub fn ndim(&self) -> usize {
        self.kmax.len()
    }

    /// Retained modes must not alias on `grid`.
    pub fn check(&self, grid: &Grid) -> Result<()> {
        if self.ndim() != grid.ndim() {
            return Err(Error::config(format!(
                "mode set has {} axes but grid has {}",
                self.ndim(),
                grid.ndim()
            )));
        }
        for (j, (&k, &n)) in self.kmax.iter().zip(grid.dims()).enumerate() {
            if k - 1 > (n - 1) / 2 {
                return Err(Error::config(format!(
                    "kmax {k} aliases on axis {j} with {n} points"
                )));
            }
        }
        Ok(())
    }

    /// Frequencies kept along axis `j`, in FFT index order.
    fn axis_freqs(&self, grid: &Grid, j: usize) -> Vec<i64> {
        let n = grid.dims()[j];
        let k = self.kmax[j] as i64;
        let nyquist = n % 2 == 0 && 2 * self.kmax[j] == n;
        let last = j + 1 == self.ndim();
        let mut out: Vec<i64> = (0..k).collect();
        if nyquist {
            out.push(n as i64 / 2);
        }
        if !last {
            out.extend(-(k - 1)..0);
        }
        out
    }

    /// Retained frequency multi-indices in row-major order.
    pub fn retained(&self, grid: &Grid) -> Result<Vec<Vec<i64>>> {
        self.check(grid)?;
        let axes: Vec<Vec<i64>> = (0..self.ndim()).map(|j| self.axis_freqs(grid, j)).collect();
        let mut out = vec![Vec::new()];
        for axis in &axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&k| {
                        let mut v = prefix.clone();
                        v.push(k);
                        v
                    })
                })
                .collect();
        }
        Ok(out)
    }

    pub fn count(&self, grid: &Grid) -> Result<usize> {
        self.check(grid)?;
        Ok((0..self.ndim()).map(|j| self.axis_freqs(grid, j).len()).product())
    }
}

/// Real channel field on a periodic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    channels: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::shape("field needs at least one channel"));
        }
        if values.len() != grid.len() * channels {
            return Err(Error::shape(format!(
                "expected {} values for {} channels on {:?}, got {}",
                grid.len() * channels,
                channels,
                grid.dims(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field values".into()));
        }
        Ok(Field { grid, channels, values })
    }

    pub(crate) fn from_parts(grid: Grid, channels: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len() * channels);
        Field { grid, channels, values }
    }

    pub fn zeros(grid: Grid, channels: usize) -> Self {
        let values = vec![0.0; grid.len() * channels];
        Field { grid, channels, values }
    }

    /// Samples `f(x, c)` at every grid point and channel.
    pub fn from_fn(grid: Grid, channels: usize, f: impl Fn(&[f64], usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len() * channels);
        for p in 0..grid.len() {
            let x = grid.coords(p);
            for c in 0..channels {
                values.push(f(&x, c));
            }
        }
        Field { grid, channels, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, point: usize, channel: usize) -> f64 {
        self.values[point * self.channels + channel]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        for point in self.values.chunks_exact(self.channels) {
            for (s, v) in sums.iter_mut().zip(point) {
                *s += v;
            }
        }
        let n = self.grid.len() as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    /// Discrete L2 norm with quadrature weight `1/N`.
    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() / self.grid.len() as f64).sqrt()
    }
}

/// Truncated half-spectrum coefficients, mode-major with channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: Grid,
    modes: ModeSet,
    channels: usize,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn new(grid: Grid, modes: ModeSet, channels: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        let count = modes.count(&grid)?;
        if coeffs.len() != count * channels {
            return Err(Error::shape(format!(
                "expected {} coefficients, got {}",
                count * channels,
                coeffs.len()
            )));
        }
        Ok(SpectralField { grid, modes, channels, coeffs })
    }

    pub fn zeros(grid: Grid, modes: ModeSet, channels: usize) -> Result<Self> {
        let count = modes.count(&grid)?;
        Ok(SpectralField { grid, modes, channels, coeffs: vec![Complex64::new(0.0, 0.0); count * channels] })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn modes(&self) -> &ModeSet {
        &self.modes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    fn mode_position(&self, k: &[i64]) -> Option<usize> {
        let plan = plan(&self.grid, &self.modes).ok()?;
        plan.freqs.chunks_exact(self.grid.ndim()).position(|f| f == k)
    }

    /// Coefficient at frequency `k`, or `None` when `k` is not retained.
    pub fn coeff(&self, k: &[i64], channel: usize) -> Option<Complex64> {
        self.mode_position(k).map(|m| self.coeffs[m * self.channels + channel])
    }

    pub fn set_coeff(&mut self, k: &[i64], channel: usize, value: Complex64) -> Result<()> {
        let m = self
            .mode_position(k)
            .ok_or_else(|| Error::shape(format!("frequency {k:?} is not retained")))?;
        self.coeffs[m * self.channels + channel] = value;
        Ok(())
    }
}

/// Multi-dimensional complex FFT that skips lines known to be zero (synthesis)
/// or not needed (analysis).
struct NdFft {
    dims: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
    /// For axis `j`: flat offsets (over axes `< j`) whose indices are all retained.
    live_outer: Vec<Vec<usize>>,
    scratch_len: usize,
}

impl NdFft {
    fn new(dims: &[usize], keep: &[Vec<bool>]) -> Self {
        let mut planner = FftPlanner::new();
        let forward: Vec<_> = dims.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inverse: Vec<_> = dims.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        let mut live_outer = Vec::with_capacity(dims.len());
        let mut outer: Vec<usize> = vec![0];
        for j in 0..dims.len() {
            live_outer.push(outer.clone());
            outer = outer
                .iter()
                .flat_map(|&o| {
                    keep[j]
                        .iter()
                        .enumerate()
                        .filter(|(_, &k)| k)
                        .map(move |(i, _)| o * dims[j] + i)
                })
                .collect();
        }
        let scratch_len = forward
            .iter()
            .chain(&inverse)
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        NdFft { dims: dims.to_vec(), forward, inverse, live_outer, scratch_len }
    }

    fn axis(&self, buf: &mut [Complex64], j: usize, inverse: bool, scratch: &mut [Complex64], line: &mut Vec<Complex64>) {
        let n = self.dims[j];
        let stride: usize = self.dims[j + 1..].iter().product();
        let fft = if inverse { &self.inverse[j] } else { &self.forward[j] };
        line.resize(n * stride, Complex64::new(0.0, 0.0));
        for &o in &self.live_outer[j] {
            let base = o * n * stride;
            let block = &mut buf[base..base + n * stride];
            if stride == 1 {
                fft.process_with_scratch(block, scratch);
                continue;
            }
            for t in 0..n {
                for s in 0..stride {
                    line[s * n + t] = block[t * stride + s];
                }
            }
            fft.process_with_scratch(line, scratch);
            for t in 0..n {
                for s in 0..stride {
                    block[t * stride + s] = line[s * n + t];
                }
            }
        }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.scratch_len];
        let mut line = Vec::new();
        for j in 0..self.dims.len() {
            self.axis(buf, j, false, &mut scratch, &mut line);
        }
    }

    fn inverse(&self, buf: &mut [Complex64]) {
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.scratch_len];
        let mut line = Vec::new();
        for j in (0..self.dims.len()).rev() {
            self.axis(buf, j, true, &mut scratch, &mut line);
        }
    }
}

/// Precomputed transform data for one `(grid, modes)` pair.
pub struct SpectralPlan {
    grid: Grid,
    modes: ModeSet,
    fft: NdFft,
    /// Full-grid FFT index of each retained mode.
    flat: Vec<usize>,
    /// Full-grid FFT index of `−k` for each retained `k`.
    neg: Vec<usize>,
    /// Frequency vectors, `[mode * d + j]`.
    freqs: Vec<i64>,
    /// `2π k_j` with Nyquist frequencies mapped to zero, `[mode * d + j]`.
    deriv: Vec<f64>,
    weight: Vec<f64>,
    sq_norm: Vec<f64>,
}

impl std::fmt::Debug for SpectralPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralPlan")
            .field("grid", &self.grid)
            .field("modes", &self.modes)
            .field("retained", &self.flat.len())
            .finish()
    }
}

static PLANS: OnceLock<Mutex<HashMap<(Grid, ModeSet), Arc<SpectralPlan>>>> = OnceLock::new();

/// Shared, cached plan for `(grid, modes)`.
pub fn plan(grid: &Grid, modes: &ModeSet) -> Result<Arc<SpectralPlan>> {
    let cache = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (grid.clone(), modes.clone());
    if let Some(p) = cache.lock().unwrap().get(&key) {
        return Ok(p.clone());
    }
    let p = Arc::new(SpectralPlan::new(grid, modes)?);
    cache.lock().unwrap().insert(key, p.clone());
    Ok(p)
}

impl SpectralPlan {
    pub fn new(grid: &Grid, modes: &ModeSet) -> Result<Self> {
        let retained = modes.retained(grid)?;
        let d = grid.ndim();
        let dims = grid.dims();
        let mut flat = Vec::with_capacity(retained.len());
        let mut neg = Vec::with_capacity(retained.len());
        let mut freqs = Vec::with_capacity(retained.len() * d);
        let mut deriv = Vec::with_capacity(retained.len() * d);
        let mut weight = Vec::with_capacity(retained.len());
        let mut sq_norm = Vec::with_capacity(retained.len());
        let mut keep: Vec<Vec<bool>> = dims.iter().map(|&n| vec![false; n]).collect();
        for k in &retained {
            let mut idx = 0usize;
            let mut nidx = 0usize;
            for j in 0..d {
                let n = dims[j] as i64;
                let i = k[j].rem_euclid(n) as usize;
                keep[j][i] = true;
                idx = idx * dims[j] + i;
                nidx = nidx * dims[j] + (-k[j]).rem_euclid(n) as usize;
                freqs.push(k[j]);
                let nyquist = dims[j] % 2 == 0 && k[j] == n / 2;
                deriv.push(if nyquist { 0.0 } else { 2.0 * PI * k[j] as f64 });
            }
            flat.push(idx);
            neg.push(nidx);
            let kd = k[d - 1];
            let nd = dims[d - 1] as i64;
            let self_conjugate = kd == 0 || (nd % 2 == 0 && kd == nd / 2);
            weight.push(if self_conjugate { 1.0 } else { 2.0 });
            sq_norm.push(k.iter().map(|&v| (v * v) as f64).sum());
        }
        Ok(SpectralPlan {
            grid: grid.clone(),
            modes: modes.clone(),
            fft: NdFft::new(dims, &keep),
            flat,
            neg,
            freqs,
            deriv,
            weight,
            sq_norm,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn modes(&self) -> &ModeSet {
        &self.modes
    }

    pub fn num_modes(&self) -> usize {
        self.flat.len()
    }

    /// Squared frequency norms `s(k) = Σ_j k_j²`, one per retained mode.
    pub fn sq_norms(&self) -> &[f64] {
        &self.sq_norm
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub fn freqs(&self) -> &[i64] {
        &self.freqs
    }

    /// `2π k_j` for mode `m`, zero at Nyquist.
    #[inline]
    pub fn deriv(&self, m: usize, j: usize) -> f64 {
        self.deriv[m * self.grid.ndim() + j]
    }

    /// Normalised forward transform of `values` (`channels` fastest) into
    /// `out` (`num_modes * channels`, mode-major).
    pub fn analyze(&self, values: &[f64], channels: usize, out: &mut [Complex64]) {
        let n = self.grid.len();
        debug_assert_eq!(values.len(), n * channels);
        debug_assert_eq!(out.len(), self.num_modes() * channels);
        let half = 0.5 / n as f64;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        // two real channels per complex transform: Z = F[a + ib]
        for c in (0..channels).step_by(2) {
            let pair = c + 1 < channels;
            for (p, b) in buf.iter_mut().enumerate() {
                let im = if pair { values[p * channels + c + 1] } else { 0.0 };
                *b = Complex64::new(values[p * channels + c], im);
            }
            self.fft.forward(&mut buf);
            for (m, (&f, &g)) in self.flat.iter().zip(&self.neg).enumerate() {
                let (z, zn) = (buf[f], buf[g].conj());
                // A = (Z(k) + conj Z(−k)) / 2, B = (Z(k) − conj Z(−k)) / 2i
                out[m * channels + c] = (z + zn) * half;
                if pair {
                    let d = z - zn;
                    out[m * channels + c + 1] = Complex64::new(d.im, -d.re) * half;
                }
            }
        }
    }

    /// `Σ_k w_k Re(F(k) e^{i2πk·x})`, or with all weights one when
    /// `weighted` is false (the adjoint of `analyze` up to `1/N`).
    pub fn synthesize(&self, coeffs: &[Complex64], channels: usize, weighted: bool, out: &mut [f64]) {
        let n = self.grid.len();
        debug_assert_eq!(coeffs.len(), self.num_modes() * channels);
        debug_assert_eq!(out.len(), n * channels);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        // Re(w A e_k) = (w/2)(A e_k + conj(A) e_−k); a second channel rides in
        // the imaginary part
        for c in (0..channels).step_by(2) {
            let pair = c + 1 < channels;
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for (m, (&f, &g)) in self.flat.iter().zip(&self.neg).enumerate() {
                let h = 0.5 * if weighted { self.weight[m] } else { 1.0 };
                let a = coeffs[m * channels + c];
                let b = if pair { coeffs[m * channels + c + 1] } else { Complex64::new(0.0, 0.0) };
                let ib = Complex64::new(-b.im, b.re);
                let ibc = Complex64::new(b.im, b.re);
                buf[f] += (a + ib) * h;
                buf[g] += (a.conj() + ibc) * h;
            }
            self.fft.inverse(&mut buf);
            for (p, z) in buf.iter().enumerate() {
                out[p * channels + c] = z.re;
                if pair {
                    out[p * channels + c + 1] = z.im;
                }
            }
        }
    }

    /// Adjoint of weighted synthesis: `g ↦ N w_k analyze(g)(k)`.
    pub fn synthesize_adjoint(&self, grad: &[f64], channels: usize, out: &mut [Complex64]) {
        self.analyze(grad, channels, out);
        let n = self.grid.len() as f64;
        for (m, chunk) in out.chunks_exact_mut(channels).enumerate() {
            let s = n * self.weight[m];
            chunk.iter_mut().for_each(|z| *z *= s);
        }
    }

    /// Adjoint of analysis: `G ↦ (1/N) Σ_k Re(G(k) e^{i2πk·x})`.
    pub fn analyze_adjoint(&self, grad: &[Complex64], channels: usize, out: &mut [f64]) {
        self.synthesize(grad, channels, false, out);
        let inv_n = 1.0 / self.grid.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv_n);
    }
}

fn check_plan_matches(plan: &SpectralPlan, grid: &Grid) -> Result<()> {
    if plan.grid() != grid {
        return Err(Error::shape(format!(
            "spectral field lives on {:?}, requested {:?}",
            plan.grid().dims(),
            grid.dims()
        )));
    }
    Ok(())
}

/// Truncated normalised forward transform.
pub fn forward_fft(f: &Field, modes: &ModeSet) -> Result<SpectralField> {
    let p = plan(f.grid(), modes)?;
    let mut coeffs = vec![Complex64::new(0.0, 0.0); p.num_modes() * f.channels()];
    p.analyze(f.values(), f.channels(), &mut coeffs);
    Ok(SpectralField { grid: f.grid().clone(), modes: modes.clone(), channels: f.channels(), coeffs })
}

/// Real field from a truncated half-spectrum; unretained modes contribute zero.
pub fn inverse_fft(spec: &SpectralField, grid: &Grid) -> Result<Field> {
    let p = plan(spec.grid(), spec.modes())?;
    check_plan_matches(&p, grid)?;
    let mut values = vec![0.0; grid.len() * spec.channels()];
    p.synthesize(spec.coeffs(), spec.channels(), true, &mut values);
    Ok(Field::from_parts(grid.clone(), spec.channels(), values))
}

/// Heat semigroup: scales coefficient `(k, c)` by `exp(-4π² s(k) τ_c)`.
pub fn diffuse(spec: &SpectralField, tau: &[f64]) -> Result<SpectralField> {
    if tau.len() != spec.channels() {
        return Err(Error::shape(format!("{} diffusion times for {} channels", tau.len(), spec.channels())));
    }
    if let Some(t) = tau.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::domain(format!("diffusion time must be nonnegative, got {t}")));
    }
    let p = plan(spec.grid(), spec.modes())?;
    let c = spec.channels();
    let mut out = spec.clone();
    for (m, chunk) in out.coeffs.chunks_exact_mut(c).enumerate() {
        let s = p.sq_norms()[m];
        if s == 0.0 {
            continue;
        }
        for (z, &t) in chunk.iter_mut().zip(tau) {
            *z *= heat_factor(s, t);
        }
    }
    Ok(out)
}

/// Spectral gradient; output channel `c * d + j` holds `∂_j v^c`.
pub fn spectral_gradient(spec: &SpectralField, grid: &Grid) -> Result<Field> {
    let p = plan(spec.grid(), spec.modes())?;
    check_plan_matches(&p, grid)?;
    let d = grid.ndim();
    let c = spec.channels();
    let mut dk = vec![Complex64::new(0.0, 0.0); spec.coeffs().len()];
    let mut comp = vec![0.0; grid.len() * c];
    let mut values = vec![0.0; grid.len() * c * d];
    for j in 0..d {
        for (m, (src, dst)) in spec.coeffs().chunks_exact(c).zip(dk.chunks_exact_mut(c)).enumerate() {
            let f = p.deriv(m, j);
            for (s, t) in src.iter().zip(dst.iter_mut()) {
                *t = Complex64::new(-f * s.im, f * s.re);
            }
        }
        p.synthesize(&dk, c, true, &mut comp);
        for pt in 0..grid.len() {
            for ch in 0..c {
                values[pt * c * d + ch * d + j] = comp[pt * c + ch];
            }
        }
    }
    Ok(Field::from_parts(grid.clone(), c * d, values))
}
