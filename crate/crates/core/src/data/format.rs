//! `DZF1` field files and the dataset archive.
//!
//! A field file is the 4-byte magic `DZF1`, a little-endian `u32` rank, one
//! `u32` per axis length, a `u32` channel count, then the values as
//! little-endian `f64` in row-major point order with channels fastest.
//!
//! An archive is a directory holding `manifest.json` plus one field file per
//! sample input and target under `train/` and `test/`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scaler::StandardScaler;
use super::tasks::{Dataset, OperatorTask, Sample};
use crate::error::{Error, Result};
use crate::spectral::{Field, Grid};

pub const FIELD_MAGIC: &[u8; 4] = b"DZF1";
pub const ARCHIVE_FORMAT: &str = "dinozaur-dataset";
pub const ARCHIVE_VERSION: u32 = 1;

pub fn write_field<W: Write>(mut w: W, f: &Field) -> Result<()> {
    w.write_all(FIELD_MAGIC)?;
    let dims = f.grid().dims();
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &n in dims {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    w.write_all(&(f.channels() as u32).to_le_bytes())?;
    for v in f.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_field<R: Read>(mut r: R) -> Result<Field> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(Error::Format(format!("bad field magic {magic:?}")));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unsupported field rank {rank}")));
    }
    let dims = (0..rank).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let channels = read_u32(&mut r)? as usize;
    let grid = Grid::new(dims)?;
    let len = grid.len().checked_mul(channels).ok_or_else(|| Error::Format("field too large".into()))?;
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after field data".into()));
    }
    let values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Field::new(grid, channels, values)
}

pub fn save_field(path: &Path, f: &Field) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_field(&mut w, f)?;
    w.flush()?;
    Ok(())
}

pub fn load_field(path: &Path) -> Result<Field> {
    read_field(BufReader::new(fs::File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFiles {
    pub input: String,
    pub target: String,
}

/// `manifest.json` of a dataset archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub task: OperatorTask,
    pub seed: u64,
    pub grid: Vec<usize>,
    pub input_channels: usize,
    pub output_channels: usize,
    /// Largest oracle residual; zero for exact targets.
    pub max_residual: f64,
    /// Fitted on the training split, population convention.
    pub input_scaler: StandardScaler,
    pub target_scaler: StandardScaler,
    pub train: Vec<SampleFiles>,
    pub test: Vec<SampleFiles>,
}

fn sample_files(split: &str, count: usize) -> Vec<SampleFiles> {
    (0..count)
        .map(|i| SampleFiles { input: format!("{split}/{i:05}.input.dzf"), target: format!("{split}/{i:05}.target.dzf") })
        .collect()
}

impl Dataset {
    pub fn input_scaler(&self) -> Result<StandardScaler> {
        StandardScaler::fit(&self.train.iter().map(|s| s.input.clone()).collect::<Vec<_>>())
    }

    pub fn target_scaler(&self) -> Result<StandardScaler> {
        StandardScaler::fit(&self.train.iter().map(|s| s.target.clone()).collect::<Vec<_>>())
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let first = self.train.first().ok_or_else(|| Error::shape("dataset has no training samples"))?;
        Ok(Manifest {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            task: self.task.clone(),
            seed: self.seed,
            grid: first.input.grid().dims().to_vec(),
            input_channels: first.input.channels(),
            output_channels: first.target.channels(),
            max_residual: self.max_residual,
            input_scaler: self.input_scaler()?,
            target_scaler: self.target_scaler()?,
            train: sample_files("train", self.train.len()),
            test: sample_files("test", self.test.len()),
        })
    }

    /// Writes the archive into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        let manifest = self.manifest()?;
        fs::create_dir_all(dir.join("train"))?;
        fs::create_dir_all(dir.join("test"))?;
        for (samples, files) in [(&self.train, &manifest.train), (&self.test, &manifest.test)] {
            for (s, f) in samples.iter().zip(files) {
                save_field(&dir.join(&f.input), &s.input)?;
                save_field(&dir.join(&f.target), &s.target)?;
            }
        }
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(dir.join("manifest.json"), json)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != ARCHIVE_FORMAT || manifest.version != ARCHIVE_VERSION {
            return Err(Error::Format(format!("unsupported archive {} v{}", manifest.format, manifest.version)));
        }
        let read = |files: &[SampleFiles]| -> Result<Vec<Sample>> {
            files
                .iter()
                .map(|f| {
                    let s = Sample { input: load_field(&dir.join(&f.input))?, target: load_field(&dir.join(&f.target))? };
                    if s.input.grid().dims() != manifest.grid.as_slice()
                        || s.input.channels() != manifest.input_channels
                        || s.target.channels() != manifest.output_channels
                    {
                        return Err(Error::Format(format!("{} does not match the manifest", f.input)));
                    }
                    Ok(s)
                })
                .collect()
        };
        Ok(Dataset {
            task: manifest.task.clone(),
            seed: manifest.seed,
            train: read(&manifest.train)?,
            test: read(&manifest.test)?,
            max_residual: manifest.max_residual,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tasks::{generate, TaskKind};

    #[test]
    fn field_round_trip_is_bit_exact() {
        let g = Grid::new(vec![4, 5]).unwrap();
        let f = Field::from_fn(g, 2, |x, c| (x[0] * 7.1 - x[1]).sin() / (c as f64 + 0.3));
        let mut buf = Vec::new();
        write_field(&mut buf, &f).unwrap();
        assert_eq!(&buf[..4], b"DZF1");
        assert_eq!(buf.len(), 4 + 4 + 8 + 4 + 40 * 8);
        let back = read_field(buf.as_slice()).unwrap();
        assert_eq!(back, f);
        let mut again = Vec::new();
        write_field(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_corrupt_files() {
        let f = Field::zeros(Grid::new(vec![4]).unwrap(), 1);
        let mut buf = Vec::new();
        write_field(&mut buf, &f).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_field(bad.as_slice()).is_err());
        assert!(read_field(&buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_field(long.as_slice()).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&OperatorTask::new(TaskKind::ScreenedPoisson, 16, 3, 2), 11).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
