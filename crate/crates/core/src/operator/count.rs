//! Exact parameter accounting.

use serde::Serialize;

use crate::error::Result;
use crate::operator::spec::{BlockKind, NetworkSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub component: String,
    pub tensor: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    pub lifting: usize,
    pub per_block: usize,
    /// Spectral multiplier parameters in one block (τ or R).
    pub multiplier_per_block: usize,
    /// All blocks together.
    pub blocks: usize,
    pub projection: usize,
    pub total: usize,
}

fn row(rows: &mut Vec<ParamRow>, component: &str, tensor: &str, count: usize) -> usize {
    rows.push(ParamRow { component: component.into(), tensor: tensor.into(), count });
    count
}

/// Per-tensor counts of the deterministic network described by `spec`.
pub fn count_params(spec: &NetworkSpec) -> Result<ParamTable> {
    spec.validate()?;
    let c = spec.width;
    let mut rows = Vec::new();
    let (a, h, q, u) = (spec.in_channels, spec.lift_hidden, spec.proj_hidden, spec.out_channels);
    let lifting = row(&mut rows, "lifting", "lift.0.weight", h * a)
        + row(&mut rows, "lifting", "lift.0.bias", h)
        + row(&mut rows, "lifting", "lift.1.weight", c * h)
        + row(&mut rows, "lifting", "lift.1.bias", c);
    let mut block_rows = Vec::new();
    let multiplier = match spec.block {
        BlockKind::Diffusion | BlockKind::DiffusionNoGrad => {
            row(&mut block_rows, "block", "w_skip", c * c);
            row(&mut block_rows, "block", "bias", c);
            if spec.block.gradient_features() {
                row(&mut block_rows, "block", "w_grad", c * c);
                row(&mut block_rows, "block", "w_mix", 2 * c * c);
            } else {
                row(&mut block_rows, "block", "w_mix", c * c);
            }
            row(&mut block_rows, "block", "log_tau", c)
        }
        BlockKind::FnoDense => {
            let modes = spec.modes()?.count(&spec.padded_grid(&spec.grid()?)?)?;
            row(&mut block_rows, "block", "w_skip", c * c);
            row(&mut block_rows, "block", "bias", c);
            row(&mut block_rows, "block", "r", 2 * c * c * modes)
        }
    };
    let per_block: usize = block_rows.iter().map(|r| r.count).sum();
    for i in 0..spec.blocks {
        for r in &block_rows {
            rows.push(ParamRow { component: format!("block.{i}"), tensor: r.tensor.clone(), count: r.count });
        }
    }
    let projection = row(&mut rows, "projection", "proj.0.weight", q * c)
        + row(&mut rows, "projection", "proj.0.bias", q)
        + row(&mut rows, "projection", "proj.1.weight", u * q)
        + row(&mut rows, "projection", "proj.1.bias", u);
    let blocks = per_block * spec.blocks;
    Ok(ParamTable {
        rows,
        lifting,
        per_block,
        multiplier_per_block: multiplier,
        blocks,
        projection,
        total: lifting + blocks + projection,
    })
}

/// Variational parameters replacing `log_tau` in the Bayesian variant:
/// mean, strictly-lower Cholesky entries and log-diagonal per block, plus the
/// noise log-variance.
pub fn count_bayes_params(spec: &NetworkSpec) -> usize {
    let c = spec.width;
    spec.blocks * (c + c * (c - 1) / 2 + c) + 1
}
