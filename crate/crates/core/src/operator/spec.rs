use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{Grid, ModeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "diffusion")]
    Diffusion,
    #[serde(rename = "diffusion-no-grad")]
    DiffusionNoGrad,
    #[serde(rename = "fno")]
    FnoDense,
}

impl BlockKind {
    pub fn is_diffusion(self) -> bool {
        !matches!(self, BlockKind::FnoDense)
    }

    pub fn gradient_features(self) -> bool {
        matches!(self, BlockKind::Diffusion)
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Diffusion => "diffusion",
            BlockKind::DiffusionNoGrad => "diffusion-no-grad",
            BlockKind::FnoDense => "fno",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(BlockKind::Diffusion),
            "diffusion-no-grad" => Ok(BlockKind::DiffusionNoGrad),
            "fno" | "fno-dense" => Ok(BlockKind::FnoDense),
            other => Err(Error::config(format!("unknown block kind {other:?}"))),
        }
    }
}

/// Architecture description; everything needed to rebuild a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Training-grid points per axis; its length is the spatial dimension.
    pub dims: Vec<usize>,
    pub kmax: Vec<usize>,
    pub width: usize,
    pub blocks: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Zero padding per side of each axis.
    pub padding: Vec<usize>,
    pub block: BlockKind,
    pub lift_hidden: usize,
    pub proj_hidden: usize,
}

impl NetworkSpec {
    /// Spec with no padding and hidden widths `d_c` (lifting) and `2 d_c`
    /// (projection).
    pub fn new(dims: Vec<usize>, kmax: Vec<usize>, width: usize, blocks: usize, in_channels: usize, out_channels: usize, block: BlockKind) -> Self {
        let padding = vec![0; dims.len()];
        NetworkSpec {
            dims,
            kmax,
            width,
            blocks,
            in_channels,
            out_channels,
            padding,
            block,
            lift_hidden: width,
            proj_hidden: 2 * width,
        }
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims.clone())
    }

    pub fn modes(&self) -> Result<ModeSet> {
        ModeSet::new(self.kmax.clone())
    }

    /// Grid the block stack runs on for inputs sampled on `grid`.
    pub fn padded_grid(&self, grid: &Grid) -> Result<Grid> {
        if grid.ndim() != self.ndim() {
            return Err(Error::shape(format!("network is {}-d, input grid is {}-d", self.ndim(), grid.ndim())));
        }
        Grid::new(grid.dims().iter().zip(&self.padding).map(|(n, p)| n + 2 * p).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        if self.kmax.len() != self.ndim() || self.padding.len() != self.ndim() {
            return Err(Error::config("kmax and padding need one entry per axis"));
        }
        if self.width == 0 || self.in_channels == 0 || self.out_channels == 0 || self.lift_hidden == 0 || self.proj_hidden == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        self.modes()?.check(&self.padded_grid(&grid)?)
    }
}
