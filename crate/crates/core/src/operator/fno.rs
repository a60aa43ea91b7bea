//! Dense spectral-multiplier block used as a baseline.
//!
//! `out = σ(W_skip v + b + F⁻¹[R(k) F[v](k)])` with a complex `c x c` matrix
//! `R(k)` per retained mode, stored as `[mode][out][in][re, im]`.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::operator::pointwise::{affine_backward, Activation};
use crate::spectral::{self, Field, ModeSet, SpectralPlan};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, Copy)]
pub struct FnoParams<'a> {
    pub w_skip: &'a [f64],
    pub bias: &'a [f64],
    pub r: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct FnoCache {
    v: Vec<f64>,
    vhat: Vec<Complex64>,
    z: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct FnoGrads {
    pub w_skip: Vec<f64>,
    pub bias: Vec<f64>,
    pub r: Vec<f64>,
    pub input: Vec<f64>,
}

#[inline]
fn r_at(r: &[f64], c: usize, m: usize, o: usize, i: usize) -> Complex64 {
    let at = ((m * c + o) * c + i) * 2;
    Complex64::new(r[at], r[at + 1])
}

pub fn fno_forward(plan: &SpectralPlan, p: &FnoParams<'_>, v: &[f64], c: usize, act: Activation) -> Result<(Vec<f64>, FnoCache)> {
    let k = plan.num_modes();
    if p.w_skip.len() != c * c || p.bias.len() != c || p.r.len() != 2 * k * c * c {
        return Err(Error::shape(format!("dense block parameters do not match width {c} and {k} modes")));
    }
    let points = plan.grid().len();
    let mut vhat = vec![ZERO; k * c];
    plan.analyze(v, c, &mut vhat);
    let mut y = vec![ZERO; k * c];
    for m in 0..k {
        for o in 0..c {
            let mut acc = ZERO;
            for i in 0..c {
                acc += r_at(p.r, c, m, o, i) * vhat[m * c + i];
            }
            y[m * c + o] = acc;
        }
    }
    let mut spatial = vec![0.0; points * c];
    plan.synthesize(&y, c, true, &mut spatial);
    let mut z = vec![0.0; points * c];
    for pt in 0..points {
        let vp = &v[pt * c..(pt + 1) * c];
        for o in 0..c {
            let ws = &p.w_skip[o * c..(o + 1) * c];
            z[pt * c + o] = p.bias[o] + spatial[pt * c + o] + ws.iter().zip(vp).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("dense block pre-activation".into()));
    }
    let out = z.iter().map(|&x| act.apply(x)).collect();
    Ok((out, FnoCache { v: v.to_vec(), vhat, z }))
}

pub fn fno_backward(plan: &SpectralPlan, p: &FnoParams<'_>, cache: &FnoCache, dout: &[f64], c: usize, act: Activation) -> FnoGrads {
    let k = plan.num_modes();
    let points = plan.grid().len();
    let dz: Vec<f64> = dout.iter().zip(&cache.z).map(|(g, &z)| g * act.grad(z)).collect();
    let mut g = FnoGrads { w_skip: vec![0.0; c * c], bias: vec![0.0; c], r: vec![0.0; p.r.len()], input: Vec::new() };
    g.input = affine_backward(p.w_skip, &cache.v, &dz, c, c, &mut g.w_skip, &mut g.bias);
    let mut dy = vec![ZERO; k * c];
    plan.synthesize_adjoint(&dz, c, &mut dy);
    let mut dvhat = vec![ZERO; k * c];
    for m in 0..k {
        for o in 0..c {
            let gy = dy[m * c + o];
            for i in 0..c {
                let at = ((m * c + o) * c + i) * 2;
                let dr = gy * cache.vhat[m * c + i].conj();
                g.r[at] += dr.re;
                g.r[at + 1] += dr.im;
                dvhat[m * c + i] += r_at(p.r, c, m, o, i).conj() * gy;
            }
        }
    }
    let mut dv = vec![0.0; points * c];
    plan.analyze_adjoint(&dvhat, c, &mut dv);
    for (a, b) in g.input.iter_mut().zip(dv) {
        *a += b;
    }
    g
}

/// Owned dense block.
#[derive(Debug, Clone, PartialEq)]
pub struct FnoBlock {
    pub width: usize,
    pub modes: ModeSet,
    pub w_skip: Vec<f64>,
    pub bias: Vec<f64>,
    pub r: Vec<f64>,
    pub activation: Activation,
}

impl FnoBlock {
    pub fn zeros(width: usize, modes: ModeSet, grid: &spectral::Grid) -> Result<Self> {
        let k = modes.count(grid)?;
        Ok(FnoBlock {
            width,
            modes,
            w_skip: vec![0.0; width * width],
            bias: vec![0.0; width],
            r: vec![0.0; 2 * k * width * width],
            activation: Activation::Gelu,
        })
    }

    pub fn set_r(&mut self, m: usize, o: usize, i: usize, value: Complex64) {
        let at = ((m * self.width + o) * self.width + i) * 2;
        self.r[at] = value.re;
        self.r[at + 1] = value.im;
    }

    pub fn params(&self) -> FnoParams<'_> {
        FnoParams { w_skip: &self.w_skip, bias: &self.bias, r: &self.r }
    }

    pub fn forward(&self, v: &Field) -> Result<Field> {
        if v.channels() != self.width {
            return Err(Error::shape(format!("block width {} but field has {} channels", self.width, v.channels())));
        }
        let plan = spectral::plan(v.grid(), &self.modes)?;
        let (out, _) = fno_forward(&plan, &self.params(), v.values(), self.width, self.activation)?;
        Ok(Field::from_parts(v.grid().clone(), self.width, out))
    }
}
