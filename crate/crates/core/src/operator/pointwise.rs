//! Pointwise (per grid point) layers acting on the channel axis.

use crate::error::{Error, Result};
use crate::nn::activation::{gelu, gelu_grad};
use crate::spectral::Field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    /// Skips the nonlinearity; only used to probe block internals in tests.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(z),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn grad(self, z: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(z),
            Activation::Identity => 1.0,
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// `y += alpha x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[p] = W x[p] + b` for every point `p`; `w` is `out x inp` row-major.
pub fn affine_forward(w: &[f64], b: &[f64], x: &[f64], inp: usize, out: usize) -> Vec<f64> {
    let points = x.len() / inp;
    let mut y = Vec::with_capacity(points * out);
    for xp in x.chunks_exact(inp) {
        for o in 0..out {
            y.push(b[o] + dot(&w[o * inp..(o + 1) * inp], xp));
        }
    }
    y
}

/// Accumulates `dW += Σ_p dy xᵀ`, `db += Σ_p dy` and returns `dx = Wᵀ dy`.
pub fn affine_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    inp: usize,
    out: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for ((xp, dyp), dxp) in x.chunks_exact(inp).zip(dy.chunks_exact(out)).zip(dx.chunks_exact_mut(inp)) {
        for o in 0..out {
            let g = dyp[o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            axpy(g, xp, &mut dw[o * inp..(o + 1) * inp]);
            axpy(g, &w[o * inp..(o + 1) * inp], dxp);
        }
    }
    dx
}

/// Owned dense layer, convenient outside the network hot path.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub inp: usize,
    pub out: usize,
}

impl AffineLayer {
    pub fn new(weight: Vec<f64>, bias: Vec<f64>, inp: usize, out: usize) -> Result<Self> {
        if weight.len() != inp * out || bias.len() != out {
            return Err(Error::shape(format!("affine layer {out}x{inp} with {} weights, {} biases", weight.len(), bias.len())));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine layer".into()));
        }
        Ok(AffineLayer { weight, bias, inp, out })
    }

    pub fn forward(&self, x: &Field) -> Result<Field> {
        if x.channels() != self.inp {
            return Err(Error::shape(format!("layer expects {} channels, got {}", self.inp, x.channels())));
        }
        let y = affine_forward(&self.weight, &self.bias, x.values(), self.inp, self.out);
        Field::new(x.grid().clone(), self.out, y)
    }
}
