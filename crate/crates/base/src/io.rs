//! Filtered-belief files.
//!
//! `<stem>.filtered.f64` (and optionally `<stem>.predictive.f64`) hold, for
//! every trajectory and step, the mean followed by the covariance. Block
//! layout packs the covariance as d/2 row-major 2×2 records; dense layout
//! stores the full d×d matrix row-major. Values are little-endian f64 and
//! `<stem>.json` is the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::envs::trajectory::{read_f64s, write_f64_file};
use crate::error::{Error, Result};
use crate::gauss::{GaussianBelief, SymBlock, SymMatrix};

pub const BELIEF_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovLayout {
    Blocks,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefManifest {
    pub format_version: u32,
    pub count: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub dim: usize,
    pub layout: CovLayout,
    pub has_predictive: bool,
    /// Free-form provenance, e.g. the filter name and config hash.
    #[serde(default)]
    pub source: String,
}

/// Belief sequences for a set of trajectories: `filtered[i][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefFile {
    pub manifest: BeliefManifest,
    pub filtered: Vec<Vec<GaussianBelief>>,
    pub predictive: Option<Vec<Vec<GaussianBelief>>>,
}

fn record_len(dim: usize, layout: CovLayout) -> usize {
    match layout {
        CovLayout::Blocks => dim + 2 * dim,
        CovLayout::Dense => dim + dim * dim,
    }
}

fn pack(b: &GaussianBelief, layout: CovLayout, out: &mut Vec<f64>) -> Result<()> {
    out.extend(b.mean().iter());
    match layout {
        CovLayout::Blocks => {
            let blocks = match b.cov() {
                SymMatrix::Blocks(bl) => bl.clone(),
                SymMatrix::Dense(m) => SymMatrix::try_blocks(m).ok_or_else(|| {
                    Error::InvalidArgument("dense covariance is not 2×2 block-diagonal".into())
                })?,
            };
            for s in blocks {
                out.extend([s.xx, s.xy, s.xy, s.yy]);
            }
        }
        CovLayout::Dense => {
            let m = b.dense_cov();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.push(m[(i, j)]);
                }
            }
        }
    }
    Ok(())
}

fn unpack(rec: &[f64], dim: usize, layout: CovLayout) -> Result<GaussianBelief> {
    let mean = DVector::from_column_slice(&rec[..dim]);
    let cov = &rec[dim..];
    match layout {
        CovLayout::Blocks => GaussianBelief::blocks(
            mean,
            cov.chunks_exact(4)
                .map(|c| SymBlock {
                    xx: c[0],
                    xy: c[1],
                    yy: c[3],
                })
                .collect(),
        ),
        CovLayout::Dense => GaussianBelief::dense(mean, DMatrix::from_row_slice(dim, dim, cov)),
    }
}

impl BeliefFile {
    pub fn new(
        filtered: Vec<Vec<GaussianBelief>>,
        predictive: Option<Vec<Vec<GaussianBelief>>>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let first = filtered
            .first()
            .and_then(|s| s.first())
            .ok_or_else(|| Error::InvalidArgument("no beliefs to store".into()))?;
        let dim = first.dim();
        let layout = if first.is_block() {
            CovLayout::Blocks
        } else {
            CovLayout::Dense
        };
        let steps = filtered[0].len();
        Ok(BeliefFile {
            manifest: BeliefManifest {
                format_version: BELIEF_FORMAT_VERSION,
                count: filtered.len(),
                steps,
                dim,
                layout,
                has_predictive: predictive.is_some(),
                source: source.into(),
            },
            filtered,
            predictive,
        })
    }

    fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
        (
            dir.join(format!("{stem}.filtered.f64")),
            dir.join(format!("{stem}.predictive.f64")),
            dir.join(format!("{stem}.json")),
        )
    }

    fn flatten(&self, seqs: &[Vec<GaussianBelief>]) -> Result<Vec<f64>> {
        let m = &self.manifest;
        let mut out = Vec::with_capacity(m.count * m.steps * record_len(m.dim, m.layout));
        for seq in seqs {
            if seq.len() != m.steps {
                return Err(Error::dims("belief sequence length", m.steps, seq.len()));
            }
            for b in seq {
                pack(b, m.layout, &mut out)?;
            }
        }
        Ok(out)
    }

    fn split(manifest: &BeliefManifest, values: &[f64]) -> Result<Vec<Vec<GaussianBelief>>> {
        let rl = record_len(manifest.dim, manifest.layout);
        let expected = rl * manifest.steps * manifest.count;
        if values.len() != expected {
            return Err(Error::dims("belief values", expected, values.len()));
        }
        values
            .chunks_exact(rl * manifest.steps)
            .map(|traj| {
                traj.chunks_exact(rl)
                    .map(|r| unpack(r, manifest.dim, manifest.layout))
                    .collect()
            })
            .collect()
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (fp, pp, mp) = Self::paths(dir, stem);
        write_f64_file(&fp, &self.flatten(&self.filtered)?)?;
        if let Some(p) = &self.predictive {
            write_f64_file(&pp, &self.flatten(p)?)?;
        }
        fs::write(mp, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let (fp, pp, mp) = Self::paths(dir, stem);
        let manifest: BeliefManifest = serde_json::from_str(&fs::read_to_string(mp)?)?;
        if manifest.format_version != BELIEF_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported belief format version {}",
                manifest.format_version
            )));
        }
        let filtered = Self::split(&manifest, &read_f64s(&fp)?)?;
        let predictive = if manifest.has_predictive {
            Some(Self::split(&manifest, &read_f64s(&pp)?)?)
        } else {
            None
        };
        Ok(BeliefFile {
            manifest,
            filtered,
            predictive,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_belief(shift: f64) -> GaussianBelief {
        GaussianBelief::blocks(
            DVector::from_vec(vec![shift, 1.0 / 3.0, -2.0, 0.1]),
            vec![
                SymBlock { xx: 2.0, xy: 0.3, yy: 1.0 },
                SymBlock { xx: 0.7, xy: -0.1, yy: 0.2 + shift },
            ],
        )
        .unwrap()
    }

    #[test]
    fn block_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let filtered = vec![vec![block_belief(0.0), block_belief(0.5)], vec![block_belief(1.0), block_belief(1.5)]];
        let predictive = vec![vec![block_belief(2.0), block_belief(0.25)], vec![block_belief(0.125), block_belief(3.0)]];
        let f = BeliefFile::new(filtered, Some(predictive), "test").unwrap();
        f.write(dir.path(), "beliefs").unwrap();
        let back = BeliefFile::read(dir.path(), "beliefs").unwrap();
        assert_eq!(back, f);
        let raw = fs::metadata(dir.path().join("beliefs.filtered.f64")).unwrap().len();
        assert_eq!(raw, 2 * 2 * (4 + 8) * 8);
    }

    #[test]
    fn dense_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = GaussianBelief::dense(
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
            DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.2, 0.1, 1.0, 0.3, 0.2, 0.3, 1.5]),
        )
        .unwrap();
        let f = BeliefFile::new(vec![vec![b.clone(), b]], None, "").unwrap();
        assert_eq!(f.manifest.layout, CovLayout::Dense);
        f.write(dir.path(), "d").unwrap();
        assert_eq!(BeliefFile::read(dir.path(), "d").unwrap(), f);
    }
}
