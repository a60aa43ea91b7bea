//! The diffusion block and gradient features.
//!
//! For input `v` (width `c`) the block computes
//!
//! ```text
//! I   = F⁻¹[exp(-4π²|k|²τ_c) F[v]]                 diffusion branch
//! G^c = tanh(Σ_r W_grad[c,r] <∇I^c, ∇I^r>)          gradient features
//! out = σ(W_skip v + b + W_mix [I; G])
//! ```
//!
//! with τ stored as `ln τ`. `∇I` is taken directly from the diffused
//! coefficients, so no extra forward transform is needed.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::operator::pointwise::{affine_backward, axpy, dot, Activation};
use crate::spectral::{self, Field, ModeSet, SpectralPlan, FOUR_PI_SQ};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Borrowed block parameters.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionParams<'a> {
    pub w_skip: &'a [f64],
    pub bias: &'a [f64],
    pub w_grad: Option<&'a [f64]>,
    /// `c x 2c` with gradient features, `c x c` without.
    pub w_mix: &'a [f64],
    pub log_tau: &'a [f64],
}

#[derive(Debug, Clone, Default)]
pub struct DiffusionGrads {
    pub w_skip: Vec<f64>,
    pub bias: Vec<f64>,
    pub w_grad: Option<Vec<f64>>,
    pub w_mix: Vec<f64>,
    pub log_tau: Vec<f64>,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DiffusionCache {
    v: Vec<f64>,
    vhat: Vec<Complex64>,
    factors: Vec<f64>,
    tau: Vec<f64>,
    diffused: Vec<f64>,
    features: Option<FeatureCache>,
    z: Vec<f64>,
}

#[derive(Debug, Clone)]
struct FeatureCache {
    /// Spatial gradients, `[p][j][c]`.
    grads: Vec<f64>,
    /// `W_grad ∇_j v`, same layout.
    mixed: Vec<f64>,
    /// `tanh` outputs, `[p][c]`.
    out: Vec<f64>,
}

/// Spatial gradients of the field with coefficients `coef`, laid out `[p][j][c]`.
fn spectral_grads(plan: &SpectralPlan, coef: &[Complex64], c: usize) -> Vec<f64> {
    let d = plan.grid().ndim();
    let points = plan.grid().len();
    let mut tmp = vec![ZERO; coef.len()];
    let mut comp = vec![0.0; points * c];
    let mut out = vec![0.0; points * c * d];
    for j in 0..d {
        for (m, (src, dst)) in coef.chunks_exact(c).zip(tmp.chunks_exact_mut(c)).enumerate() {
            let f = plan.deriv(m, j);
            for (s, t) in src.iter().zip(dst.iter_mut()) {
                // i f s
                *t = Complex64::new(-f * s.im, f * s.re);
            }
        }
        plan.synthesize(&tmp, c, true, &mut comp);
        for (p, src) in comp.chunks_exact(c).enumerate() {
            out[(p * d + j) * c..(p * d + j + 1) * c].copy_from_slice(src);
        }
    }
    out
}

fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let c = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(c)) {
        *o = dot(row, x);
    }
}

// Σ_r W[c,r] <∇v^c, ∇v^r> = Σ_j ∇_j v^c (W ∇_j v)^c
fn features_forward(plan: &SpectralPlan, coef: &[Complex64], c: usize, w_grad: &[f64]) -> FeatureCache {
    let d = plan.grid().ndim();
    let grads = spectral_grads(plan, coef, c);
    let mut mixed = vec![0.0; grads.len()];
    let mut out = vec![0.0; plan.grid().len() * c];
    for ((gp, hp), op) in grads.chunks_exact(c * d).zip(mixed.chunks_exact_mut(c * d)).zip(out.chunks_exact_mut(c)) {
        for (g, h) in gp.chunks_exact(c).zip(hp.chunks_exact_mut(c)) {
            matvec(w_grad, g, h);
            for ((o, a), b) in op.iter_mut().zip(g).zip(h.iter()) {
                *o += a * b;
            }
        }
        op.iter_mut().for_each(|o| *o = o.tanh());
    }
    FeatureCache { grads, mixed, out }
}

/// Adds `∂L/∂W_grad` into `dw` and returns `∂L/∂coef` from the feature path.
fn features_backward(
    plan: &SpectralPlan,
    cache: &FeatureCache,
    c: usize,
    w_grad: &[f64],
    dout: &[f64],
    dw: &mut [f64],
) -> Vec<Complex64> {
    let d = plan.grid().ndim();
    let points = plan.grid().len();
    let mut dgrads = vec![0.0; points * c * d];
    let mut ds = vec![0.0; c];
    let mut u = vec![0.0; c];
    for p in 0..points {
        for ch in 0..c {
            let y = cache.out[p * c + ch];
            ds[ch] = dout[p * c + ch] * (1.0 - y * y);
        }
        if ds.iter().all(|&x| x == 0.0) {
            continue;
        }
        for j in 0..d {
            let off = (p * d + j) * c;
            let g = &cache.grads[off..off + c];
            let h = &cache.mixed[off..off + c];
            let dg = &mut dgrads[off..off + c];
            for ch in 0..c {
                u[ch] = ds[ch] * g[ch];
                dg[ch] = ds[ch] * h[ch];
            }
            // dW += u gᵀ, dg += Wᵀ u
            for (&uc, (dwr, wr)) in u.iter().zip(dw.chunks_exact_mut(c).zip(w_grad.chunks_exact(c))) {
                if uc == 0.0 {
                    continue;
                }
                axpy(uc, g, dwr);
                axpy(uc, wr, dg);
            }
        }
    }
    let k = plan.num_modes();
    let mut dcoef = vec![ZERO; k * c];
    let mut comp = vec![0.0; points * c];
    let mut adj = vec![ZERO; k * c];
    for j in 0..d {
        for (p, dst) in comp.chunks_exact_mut(c).enumerate() {
            dst.copy_from_slice(&dgrads[(p * d + j) * c..(p * d + j + 1) * c]);
        }
        plan.synthesize_adjoint(&comp, c, &mut adj);
        for (m, (a, dc)) in adj.chunks_exact(c).zip(dcoef.chunks_exact_mut(c)).enumerate() {
            let f = plan.deriv(m, j);
            for (x, y) in a.iter().zip(dc.iter_mut()) {
                // conj(i f) x = -i f x
                *y += Complex64::new(f * x.im, -f * x.re);
            }
        }
    }
    dcoef
}

/// Gradient-feature operator on its own: channel `c` of the output is
/// `tanh(Σ_r w_grad[c,r] <∇v^c, ∇v^r>)`, gradients taken on `modes`.
pub fn gradient_features(v: &Field, w_grad: &[f64], modes: &ModeSet) -> Result<Field> {
    let c = v.channels();
    if w_grad.len() != c * c {
        return Err(Error::shape(format!("w_grad needs {} entries, got {}", c * c, w_grad.len())));
    }
    let plan = spectral::plan(v.grid(), modes)?;
    let mut coef = vec![ZERO; plan.num_modes() * c];
    plan.analyze(v.values(), c, &mut coef);
    let cache = features_forward(&plan, &coef, c, w_grad);
    Ok(Field::from_parts(v.grid().clone(), c, cache.out))
}

pub(crate) fn check_params(p: &DiffusionParams<'_>, c: usize) -> Result<()> {
    let feats = if p.w_grad.is_some() { 2 * c } else { c };
    let ok = p.w_skip.len() == c * c
        && p.bias.len() == c
        && p.w_grad.is_none_or(|w| w.len() == c * c)
        && p.w_mix.len() == c * feats
        && p.log_tau.len() == c;
    if ok {
        Ok(())
    } else {
        Err(Error::shape(format!("diffusion block parameters do not match width {c}")))
    }
}

pub fn diffusion_forward(
    plan: &SpectralPlan,
    p: &DiffusionParams<'_>,
    v: &[f64],
    c: usize,
    act: Activation,
) -> Result<(Vec<f64>, DiffusionCache)> {
    check_params(p, c)?;
    let points = plan.grid().len();
    let k = plan.num_modes();
    let tau: Vec<f64> = p.log_tau.iter().map(|l| l.exp()).collect();
    let mut vhat = vec![ZERO; k * c];
    plan.analyze(v, c, &mut vhat);
    let mut factors = vec![0.0; k * c];
    let mut coef = vec![ZERO; k * c];
    for m in 0..k {
        let s = plan.sq_norms()[m];
        for ch in 0..c {
            let f = spectral::heat_factor(s, tau[ch]);
            factors[m * c + ch] = f;
            coef[m * c + ch] = vhat[m * c + ch] * f;
        }
    }
    let mut diffused = vec![0.0; points * c];
    plan.synthesize(&coef, c, true, &mut diffused);
    let features = p.w_grad.map(|w| features_forward(plan, &coef, c, w));
    let nf = if features.is_some() { 2 * c } else { c };
    let mut z = vec![0.0; points * c];
    for pt in 0..points {
        let vp = &v[pt * c..(pt + 1) * c];
        let ip = &diffused[pt * c..(pt + 1) * c];
        for o in 0..c {
            let wm = &p.w_mix[o * nf..(o + 1) * nf];
            let mut acc = p.bias[o] + dot(&p.w_skip[o * c..(o + 1) * c], vp) + dot(&wm[..c], ip);
            if let Some(fc) = &features {
                acc += dot(&wm[c..], &fc.out[pt * c..(pt + 1) * c]);
            }
            z[pt * c + o] = acc;
        }
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("diffusion block pre-activation".into()));
    }
    let out = z.iter().map(|&x| act.apply(x)).collect();
    Ok((out, DiffusionCache { v: v.to_vec(), vhat, factors, tau, diffused, features, z }))
}

/// `time_grad_scale` is 1 except when deliberately corrupting the adjoint.
pub fn diffusion_backward(
    plan: &SpectralPlan,
    p: &DiffusionParams<'_>,
    cache: &DiffusionCache,
    dout: &[f64],
    c: usize,
    act: Activation,
    time_grad_scale: f64,
) -> DiffusionGrads {
    let points = plan.grid().len();
    let k = plan.num_modes();
    let nf = if cache.features.is_some() { 2 * c } else { c };
    let dz: Vec<f64> = dout.iter().zip(&cache.z).map(|(g, &z)| g * act.grad(z)).collect();

    let mut g = DiffusionGrads {
        w_skip: vec![0.0; c * c],
        bias: vec![0.0; c],
        w_grad: p.w_grad.map(|_| vec![0.0; c * c]),
        w_mix: vec![0.0; c * nf],
        log_tau: vec![0.0; c],
        input: Vec::new(),
    };
    g.input = affine_backward(p.w_skip, &cache.v, &dz, c, c, &mut g.w_skip, &mut g.bias);

    // W_mix and the feature cotangents
    let mut d_diffused = vec![0.0; points * c];
    let mut d_feat = vec![0.0; if cache.features.is_some() { points * c } else { 0 }];
    for pt in 0..points {
        let dzp = &dz[pt * c..(pt + 1) * c];
        let ip = &cache.diffused[pt * c..(pt + 1) * c];
        for o in 0..c {
            let gz = dzp[o];
            if gz == 0.0 {
                continue;
            }
            let wm = &p.w_mix[o * nf..(o + 1) * nf];
            let dwm = &mut g.w_mix[o * nf..(o + 1) * nf];
            axpy(gz, ip, &mut dwm[..c]);
            axpy(gz, &wm[..c], &mut d_diffused[pt * c..(pt + 1) * c]);
            if let Some(fc) = &cache.features {
                axpy(gz, &fc.out[pt * c..(pt + 1) * c], &mut dwm[c..]);
                axpy(gz, &wm[c..], &mut d_feat[pt * c..(pt + 1) * c]);
            }
        }
    }

    let mut dcoef = vec![ZERO; k * c];
    plan.synthesize_adjoint(&d_diffused, c, &mut dcoef);
    if let (Some(fc), Some(w), Some(dw)) = (&cache.features, p.w_grad, g.w_grad.as_mut()) {
        let extra = features_backward(plan, fc, c, w, &d_feat, dw);
        for (a, b) in dcoef.iter_mut().zip(extra) {
            *a += b;
        }
    }

    // coef = factor(τ) * vhat
    let mut dvhat = vec![ZERO; k * c];
    let mut dtau = vec![0.0; c];
    for m in 0..k {
        let s = plan.sq_norms()[m];
        for ch in 0..c {
            let i = m * c + ch;
            let f = cache.factors[i];
            dvhat[i] = dcoef[i] * f;
            if s != 0.0 {
                let inner = dcoef[i].re * cache.vhat[i].re + dcoef[i].im * cache.vhat[i].im;
                dtau[ch] += -FOUR_PI_SQ * s * f * inner;
            }
        }
    }
    for ch in 0..c {
        g.log_tau[ch] = dtau[ch] * cache.tau[ch] * time_grad_scale;
    }
    let mut dv = vec![0.0; points * c];
    plan.analyze_adjoint(&dvhat, c, &mut dv);
    for (a, b) in g.input.iter_mut().zip(dv) {
        *a += b;
    }
    g
}

/// Owned diffusion block, convenient for direct use on fields.
#[derive(Debug, Clone, PartialEq)]
pub struct DinozaurBlock {
    pub width: usize,
    pub modes: ModeSet,
    pub w_skip: Vec<f64>,
    pub bias: Vec<f64>,
    pub w_grad: Option<Vec<f64>>,
    pub w_mix: Vec<f64>,
    pub log_tau: Vec<f64>,
    pub activation: Activation,
}

impl DinozaurBlock {
    /// All-zero weights, `τ = 1`, GELU activation.
    pub fn zeros(width: usize, modes: ModeSet, gradient_features: bool) -> Self {
        let nf = if gradient_features { 2 * width } else { width };
        DinozaurBlock {
            width,
            modes,
            w_skip: vec![0.0; width * width],
            bias: vec![0.0; width],
            w_grad: gradient_features.then(|| vec![0.0; width * width]),
            w_mix: vec![0.0; width * nf],
            log_tau: vec![0.0; width],
            activation: Activation::Gelu,
        }
    }

    pub fn set_times(&mut self, tau: &[f64]) {
        self.log_tau = tau.iter().map(|t| t.ln()).collect();
    }

    pub fn params(&self) -> DiffusionParams<'_> {
        DiffusionParams {
            w_skip: &self.w_skip,
            bias: &self.bias,
            w_grad: self.w_grad.as_deref(),
            w_mix: &self.w_mix,
            log_tau: &self.log_tau,
        }
    }

    pub fn forward(&self, v: &Field) -> Result<Field> {
        if v.channels() != self.width {
            return Err(Error::shape(format!("block width {} but field has {} channels", self.width, v.channels())));
        }
        let plan = spectral::plan(v.grid(), &self.modes)?;
        let (out, _) = diffusion_forward(&plan, &self.params(), v.values(), self.width, self.activation)?;
        Ok(Field::from_parts(v.grid().clone(), self.width, out))
    }
}
