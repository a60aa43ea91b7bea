//! Zero padding around the block stack.
//!
//! `p[j]` points are added on *each* side of axis `j`, so an axis of `n`
//! points becomes `n + 2 p[j]`. The original samples occupy the centre.

use crate::error::{Error, Result};
use crate::spectral::{Field, Grid};

fn check(grid: &Grid, p: &[usize]) -> Result<()> {
    if p.len() != grid.ndim() {
        return Err(Error::shape(format!("{} padding amounts for a {}-d grid", p.len(), grid.ndim())));
    }
    Ok(())
}

pub(crate) fn pad_values(values: &[f64], grid: &Grid, channels: usize, p: &[usize]) -> Result<(Grid, Vec<f64>)> {
    check(grid, p)?;
    let padded = Grid::new(grid.dims().iter().zip(p).map(|(n, q)| n + 2 * q).collect())?;
    if p.iter().all(|&q| q == 0) {
        return Ok((padded, values.to_vec()));
    }
    let mut out = vec![0.0; padded.len() * channels];
    let mut idx = vec![0usize; grid.ndim()];
    for (pt, chunk) in values.chunks_exact(channels).enumerate() {
        let mi = grid.multi_index(pt);
        for j in 0..grid.ndim() {
            idx[j] = mi[j] + p[j];
        }
        let q = padded.flat_index(&idx);
        out[q * channels..(q + 1) * channels].copy_from_slice(chunk);
    }
    Ok((padded, out))
}

pub(crate) fn crop_values(values: &[f64], padded: &Grid, channels: usize, p: &[usize]) -> Result<(Grid, Vec<f64>)> {
    check(padded, p)?;
    let dims = padded
        .dims()
        .iter()
        .zip(p)
        .map(|(n, q)| n.checked_sub(2 * q).ok_or_else(|| Error::shape("crop larger than grid")))
        .collect::<Result<Vec<_>>>()?;
    let grid = Grid::new(dims)?;
    if p.iter().all(|&q| q == 0) {
        return Ok((grid, values.to_vec()));
    }
    let mut out = Vec::with_capacity(grid.len() * channels);
    let mut idx = vec![0usize; grid.ndim()];
    for pt in 0..grid.len() {
        let mi = grid.multi_index(pt);
        for j in 0..grid.ndim() {
            idx[j] = mi[j] + p[j];
        }
        let q = padded.flat_index(&idx);
        out.extend_from_slice(&values[q * channels..(q + 1) * channels]);
    }
    Ok((grid, out))
}

pub fn pad(f: &Field, p: &[usize]) -> Result<Field> {
    let (grid, values) = pad_values(f.values(), f.grid(), f.channels(), p)?;
    Field::new(grid, f.channels(), values)
}

pub fn crop(f: &Field, p: &[usize]) -> Result<Field> {
    let (grid, values) = crop_values(f.values(), f.grid(), f.channels(), p)?;
    Field::new(grid, f.channels(), values)
}
