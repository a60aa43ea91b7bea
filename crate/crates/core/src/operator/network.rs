//! Whole-network forward and reverse passes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::activation::{gelu, gelu_grad};
use crate::nn::params::{GradBuffer, ParamStore};
use crate::operator::block::{diffusion_backward, diffusion_forward, DiffusionCache, DiffusionParams};
use crate::operator::fno::{fno_backward, fno_forward, FnoCache, FnoParams};
use crate::operator::padding::{crop_values, pad_values};
use crate::operator::pointwise::{affine_backward, affine_forward, Activation};
use crate::operator::spec::{BlockKind, NetworkSpec};
use crate::rng::SeededRng;
use crate::spectral::{self, Field, Grid, SpectralPlan};

/// Location of the initial diffusion times, `ln 0.01`.
pub const LOG_TAU_INIT_MEAN: f64 = -4.605170185988091;
pub const LOG_TAU_INIT_STD: f64 = 0.5;

/// Deliberate adjoint corruption for negative-control gradient checks.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdjointFault {
    /// Multiplies every diffusion-time gradient by this factor.
    ScaleTimeGradient(f64),
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

#[derive(Debug, Clone, Copy)]
enum BlockSlots {
    Diffusion { w_skip: usize, bias: usize, w_grad: Option<usize>, w_mix: usize, log_tau: Option<usize> },
    Fno { w_skip: usize, bias: usize, r: usize },
}

#[derive(Debug, Clone)]
enum BlockCache {
    Diffusion(DiffusionCache),
    Fno(FnoCache),
}

/// Everything the reverse pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    grid: Grid,
    padded: Grid,
    input: Vec<f64>,
    lift_pre: Vec<f64>,
    lift_act: Vec<f64>,
    blocks: Vec<BlockCache>,
    cropped: Vec<f64>,
    proj_pre: Vec<f64>,
    proj_act: Vec<f64>,
}

impl ForwardCache {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }
}

/// Network structure bound to parameter slots in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    lift: [Affine; 2],
    blocks: Vec<BlockSlots>,
    proj: [Affine; 2],
    learned_times: bool,
    fault: Option<AdjointFault>,
}

fn init_affine(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut SeededRng) -> Result<Affine> {
    let w = store.insert_xavier(format!("{name}.weight"), out, inp, rng)?;
    let b = store.insert_zeros(format!("{name}.bias"), vec![out], false)?;
    Ok(Affine { w, b, inp, out })
}

fn bind_tensor(store: &ParamStore, name: &str, shape: &[usize]) -> Result<usize> {
    let idx = store.index_of(name)?;
    if store.tensor(idx).shape != shape {
        return Err(Error::shape(format!("{name} has shape {:?}, expected {shape:?}", store.tensor(idx).shape)));
    }
    Ok(idx)
}

fn bind_affine(store: &ParamStore, name: &str, inp: usize, out: usize) -> Result<Affine> {
    Ok(Affine {
        w: bind_tensor(store, &format!("{name}.weight"), &[out, inp])?,
        b: bind_tensor(store, &format!("{name}.bias"), &[out])?,
        inp,
        out,
    })
}

impl Network {
    /// Fresh parameters. With `learned_times` each diffusion block owns a
    /// `log_tau` tensor; otherwise times must be supplied on every call.
    pub fn init(spec: &NetworkSpec, rng: &mut SeededRng, learned_times: bool) -> Result<(Network, ParamStore)> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let c = spec.width;
        let lift = [
            init_affine(&mut store, "lift.0", spec.in_channels, spec.lift_hidden, rng)?,
            init_affine(&mut store, "lift.1", spec.lift_hidden, c, rng)?,
        ];
        let modes = spec.modes()?.count(&spec.padded_grid(&spec.grid()?)?)?;
        let mut blocks = Vec::with_capacity(spec.blocks);
        for i in 0..spec.blocks {
            let w_skip = store.insert_xavier(format!("block.{i}.w_skip"), c, c, rng)?;
            let bias = store.insert_zeros(format!("block.{i}.bias"), vec![c], false)?;
            let slots = match spec.block {
                BlockKind::Diffusion | BlockKind::DiffusionNoGrad => {
                    let grad = spec.block.gradient_features();
                    let w_grad = if grad { Some(store.insert_xavier(format!("block.{i}.w_grad"), c, c, rng)?) } else { None };
                    let w_mix = store.insert_xavier(format!("block.{i}.w_mix"), c, if grad { 2 * c } else { c }, rng)?;
                    let log_tau = if learned_times {
                        let v = (0..c).map(|_| LOG_TAU_INIT_MEAN + LOG_TAU_INIT_STD * rng.normal()).collect();
                        Some(store.insert(format!("block.{i}.log_tau"), vec![c], v, false)?)
                    } else {
                        None
                    };
                    BlockSlots::Diffusion { w_skip, bias, w_grad, w_mix, log_tau }
                }
                BlockKind::FnoDense => {
                    let scale = 1.0 / (c * c) as f64;
                    let v = (0..2 * modes * c * c).map(|_| rng.uniform(0.0, scale)).collect();
                    let r = store.insert(format!("block.{i}.r"), vec![modes, c, c, 2], v, true)?;
                    BlockSlots::Fno { w_skip, bias, r }
                }
            };
            blocks.push(slots);
        }
        let proj = [
            init_affine(&mut store, "proj.0", c, spec.proj_hidden, rng)?,
            init_affine(&mut store, "proj.1", spec.proj_hidden, spec.out_channels, rng)?,
        ];
        let net = Network { spec: spec.clone(), lift, blocks, proj, learned_times, fault: None };
        Ok((net, store))
    }

    /// Rebinds a network to an existing store (e.g. a loaded checkpoint).
    pub fn bind(spec: &NetworkSpec, store: &ParamStore, learned_times: bool) -> Result<Network> {
        spec.validate()?;
        let c = spec.width;
        let lift = [
            bind_affine(store, "lift.0", spec.in_channels, spec.lift_hidden)?,
            bind_affine(store, "lift.1", spec.lift_hidden, c)?,
        ];
        let modes = spec.modes()?.count(&spec.padded_grid(&spec.grid()?)?)?;
        let mut blocks = Vec::with_capacity(spec.blocks);
        for i in 0..spec.blocks {
            let w_skip = bind_tensor(store, &format!("block.{i}.w_skip"), &[c, c])?;
            let bias = bind_tensor(store, &format!("block.{i}.bias"), &[c])?;
            blocks.push(match spec.block {
                BlockKind::Diffusion | BlockKind::DiffusionNoGrad => {
                    let grad = spec.block.gradient_features();
                    let w_grad = if grad { Some(bind_tensor(store, &format!("block.{i}.w_grad"), &[c, c])?) } else { None };
                    let w_mix = bind_tensor(store, &format!("block.{i}.w_mix"), &[c, if grad { 2 * c } else { c }])?;
                    let log_tau = if learned_times { Some(bind_tensor(store, &format!("block.{i}.log_tau"), &[c])?) } else { None };
                    BlockSlots::Diffusion { w_skip, bias, w_grad, w_mix, log_tau }
                }
                BlockKind::FnoDense => {
                    let r = bind_tensor(store, &format!("block.{i}.r"), &[modes, c, c, 2])?;
                    BlockSlots::Fno { w_skip, bias, r }
                }
            });
        }
        let proj = [
            bind_affine(store, "proj.0", c, spec.proj_hidden)?,
            bind_affine(store, "proj.1", spec.proj_hidden, spec.out_channels)?,
        ];
        Ok(Network { spec: spec.clone(), lift, blocks, proj, learned_times, fault: None })
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: Option<AdjointFault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn has_learned_times(&self) -> bool {
        self.learned_times
    }

    /// Number of diffusion times per block (zero for dense blocks).
    pub fn times_per_block(&self) -> usize {
        if self.spec.block.is_diffusion() {
            self.spec.width
        } else {
            0
        }
    }

    /// `ln τ` of every block read from the store (learned-times networks).
    pub fn log_times(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .map(|b| match b {
                BlockSlots::Diffusion { log_tau: Some(i), .. } => store.value(*i).to_vec(),
                _ => Vec::new(),
            })
            .collect()
    }

    /// Store slot of block `i`'s `log_tau`, when it has one.
    pub fn log_tau_slot(&self, i: usize) -> Option<usize> {
        match self.blocks.get(i) {
            Some(BlockSlots::Diffusion { log_tau, .. }) => *log_tau,
            _ => None,
        }
    }

    fn check_times(&self, log_times: &[Vec<f64>]) -> Result<()> {
        if log_times.len() != self.blocks.len() || log_times.iter().any(|t| t.len() != self.times_per_block()) {
            return Err(Error::shape(format!(
                "need {} blocks x {} log-times",
                self.blocks.len(),
                self.times_per_block()
            )));
        }
        if log_times.iter().flatten().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("diffusion times".into()));
        }
        Ok(())
    }

    fn plan(&self, padded: &Grid) -> Result<Arc<SpectralPlan>> {
        spectral::plan(padded, &self.spec.modes()?)
    }

    fn diffusion_params<'a>(&self, store: &'a ParamStore, slots: &BlockSlots, log_tau: &'a [f64]) -> DiffusionParams<'a> {
        match *slots {
            BlockSlots::Diffusion { w_skip, bias, w_grad, w_mix, .. } => DiffusionParams {
                w_skip: store.value(w_skip),
                bias: store.value(bias),
                w_grad: w_grad.map(|i| store.value(i)),
                w_mix: store.value(w_mix),
                log_tau,
            },
            BlockSlots::Fno { .. } => unreachable!("dense block has no diffusion parameters"),
        }
    }

    /// Forward pass on any grid with the network's dimensionality.
    pub fn forward(&self, store: &ParamStore, input: &Field, log_times: &[Vec<f64>]) -> Result<(Field, ForwardCache)> {
        self.check_times(log_times)?;
        if input.channels() != self.spec.in_channels {
            return Err(Error::shape(format!("network takes {} input channels, got {}", self.spec.in_channels, input.channels())));
        }
        let grid = input.grid().clone();
        let padded = self.spec.padded_grid(&grid)?;
        let plan = self.plan(&padded)?;
        let c = self.spec.width;

        let [l0, l1] = self.lift;
        let lift_pre = affine_forward(store.value(l0.w), store.value(l0.b), input.values(), l0.inp, l0.out);
        let lift_act: Vec<f64> = lift_pre.iter().map(|&x| gelu(x)).collect();
        let lifted = affine_forward(store.value(l1.w), store.value(l1.b), &lift_act, l1.inp, l1.out);
        let (_, mut v) = pad_values(&lifted, &grid, c, &self.spec.padding)?;

        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, slots) in self.blocks.iter().enumerate() {
            let (out, cache) = match *slots {
                BlockSlots::Diffusion { .. } => {
                    let p = self.diffusion_params(store, slots, &log_times[i]);
                    let (o, cch) = diffusion_forward(&plan, &p, &v, c, Activation::Gelu)
                        .map_err(|e| block_error(e, i))?;
                    (o, BlockCache::Diffusion(cch))
                }
                BlockSlots::Fno { w_skip, bias, r } => {
                    let p = FnoParams { w_skip: store.value(w_skip), bias: store.value(bias), r: store.value(r) };
                    let (o, cch) = fno_forward(&plan, &p, &v, c, Activation::Gelu).map_err(|e| block_error(e, i))?;
                    (o, BlockCache::Fno(cch))
                }
            };
            caches.push(cache);
            v = out;
        }

        let (_, cropped) = crop_values(&v, &padded, c, &self.spec.padding)?;
        let [p0, p1] = self.proj;
        let proj_pre = affine_forward(store.value(p0.w), store.value(p0.b), &cropped, p0.inp, p0.out);
        let proj_act: Vec<f64> = proj_pre.iter().map(|&x| gelu(x)).collect();
        let out = affine_forward(store.value(p1.w), store.value(p1.b), &proj_act, p1.inp, p1.out);
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        let cache = ForwardCache {
            grid: grid.clone(),
            padded,
            input: input.values().to_vec(),
            lift_pre,
            lift_act,
            blocks: caches,
            cropped,
            proj_pre,
            proj_act,
        };
        Ok((Field::from_parts(grid, self.spec.out_channels, out), cache))
    }

    pub fn predict(&self, store: &ParamStore, input: &Field, log_times: &[Vec<f64>]) -> Result<Field> {
        self.forward(store, input, log_times).map(|(f, _)| f)
    }

    /// Reverse pass for output cotangent `grad_out`. Parameter gradients are
    /// added into `grads`; the `ln τ` cotangents of every block are returned
    /// (and also added to the store slots when times are learned).
    pub fn backward(
        &self,
        store: &ParamStore,
        log_times: &[Vec<f64>],
        cache: &ForwardCache,
        grad_out: &[f64],
        grads: &mut GradBuffer,
    ) -> Result<Vec<Vec<f64>>> {
        let c = self.spec.width;
        let plan = self.plan(&cache.padded)?;
        let time_scale = match self.fault {
            Some(AdjointFault::ScaleTimeGradient(s)) => s,
            None => 1.0,
        };

        let [p0, p1] = self.proj;
        let d_act = backprop_affine(store, grads, p1, &cache.proj_act, grad_out);
        let d_pre: Vec<f64> = d_act.iter().zip(&cache.proj_pre).map(|(g, &x)| g * gelu_grad(x)).collect();
        let d_cropped = backprop_affine(store, grads, p0, &cache.cropped, &d_pre);
        let (_, mut dv) = pad_values(&d_cropped, &cache.grid, c, &self.spec.padding)?;

        let mut d_times = vec![Vec::new(); self.blocks.len()];
        for (i, slots) in self.blocks.iter().enumerate().rev() {
            match (*slots, &cache.blocks[i]) {
                (BlockSlots::Diffusion { w_skip, bias, w_grad, w_mix, log_tau }, BlockCache::Diffusion(bc)) => {
                    let p = self.diffusion_params(store, slots, &log_times[i]);
                    let g = diffusion_backward(&plan, &p, bc, &dv, c, Activation::Gelu, time_scale);
                    add(grads.get_mut(w_skip), &g.w_skip);
                    add(grads.get_mut(bias), &g.bias);
                    add(grads.get_mut(w_mix), &g.w_mix);
                    if let (Some(slot), Some(gw)) = (w_grad, &g.w_grad) {
                        add(grads.get_mut(slot), gw);
                    }
                    if let Some(slot) = log_tau {
                        add(grads.get_mut(slot), &g.log_tau);
                    }
                    d_times[i] = g.log_tau;
                    dv = g.input;
                }
                (BlockSlots::Fno { w_skip, bias, r }, BlockCache::Fno(bc)) => {
                    let p = FnoParams { w_skip: store.value(w_skip), bias: store.value(bias), r: store.value(r) };
                    let g = fno_backward(&plan, &p, bc, &dv, c, Activation::Gelu);
                    add(grads.get_mut(w_skip), &g.w_skip);
                    add(grads.get_mut(bias), &g.bias);
                    add(grads.get_mut(r), &g.r);
                    dv = g.input;
                }
                _ => return Err(Error::shape("forward cache does not match network")),
            }
        }

        let (_, d_lifted) = crop_values(&dv, &cache.padded, c, &self.spec.padding)?;
        let [l0, l1] = self.lift;
        let d_act = backprop_affine(store, grads, l1, &cache.lift_act, &d_lifted);
        let d_pre: Vec<f64> = d_act.iter().zip(&cache.lift_pre).map(|(g, &x)| g * gelu_grad(x)).collect();
        backprop_affine(store, grads, l0, &cache.input, &d_pre);
        Ok(d_times)
    }
}

fn block_error(e: Error, i: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("block {i}: {what}")),
        other => other,
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn backprop_affine(store: &ParamStore, grads: &mut GradBuffer, layer: Affine, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let mut dw = vec![0.0; layer.inp * layer.out];
    let mut db = vec![0.0; layer.out];
    let dx = affine_backward(store.value(layer.w), x, dy, layer.inp, layer.out, &mut dw, &mut db);
    add(grads.get_mut(layer.w), &dw);
    add(grads.get_mut(layer.b), &db);
    dx
}
