use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// One named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named parameter registry. Insertion order is stable and defines the
/// layout of gradient buffers and checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>, decay: bool) -> Result<usize> {
        let name = name.into();
        let len: usize = shape.iter().product();
        if len != value.len() {
            return Err(Error::shape(format!("{name}: shape {shape:?} but {} values", value.len())));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        let grad = vec![0.0; len];
        let (idx, _) = self.entries.insert_full(name, Tensor { shape, value, grad, decay });
        Ok(idx)
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` for an `out x in` matrix.
    pub fn insert_xavier(&mut self, name: impl Into<String>, out: usize, inp: usize, rng: &mut SeededRng) -> Result<usize> {
        let bound = (6.0 / (inp + out) as f64).sqrt();
        let value = (0..out * inp).map(|_| rng.uniform(-bound, bound)).collect();
        self.insert(name, vec![out, inp], value, true)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>, decay: bool) -> Result<usize> {
        let len = shape.iter().product();
        self.insert(name, shape, vec![0.0; len], decay)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.entries
            .get_index_of(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn name(&self, idx: usize) -> &str {
        self.entries.get_index(idx).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx]
    }

    pub fn value(&self, idx: usize) -> &[f64] {
        &self.entries[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.entries[idx].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grad(&mut self) {
        for t in self.entries.values_mut() {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Fresh zeroed buffer shaped like the store.
    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer { grads: self.entries.values().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn accumulate(&mut self, buf: &GradBuffer) {
        for (t, g) in self.entries.values_mut().zip(&buf.grads) {
            for (a, b) in t.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// First parameter holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, t)| t.value.iter().any(|v| !v.is_finite()))
            .map(|(k, _)| k.as_str())
    }
}

/// Gradient accumulator laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn get_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.grads[idx]
    }

    pub fn get(&self, idx: usize) -> &[f64] {
        &self.grads[idx]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn add(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}
