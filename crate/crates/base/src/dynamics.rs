//! Block-diagonal latent dynamics: each coordinate pair evolves by a scaled
//! rotation `exp(ρ)·R(ω)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gauss::{GaussianBelief, LinearGaussianMap, PairMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDynamics {
    rho: Vec<f64>,
    omega: Vec<f64>,
}

impl BlockDynamics {
    pub fn new(rho: Vec<f64>, omega: Vec<f64>) -> Result<Self> {
        check_dim("omega length", rho.len(), omega.len())?;
        if rho.is_empty() {
            return Err(Error::InvalidArgument("dynamics needs at least one block".into()));
        }
        Ok(BlockDynamics { rho, omega })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::OddDimension(dim));
        }
        Self::new(vec![0.0; dim / 2], vec![0.0; dim / 2])
    }

    /// ρ ~ U[0, 0.01], ω ~ U[0, π].
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        if dim % 2 != 0 || dim == 0 {
            return Err(Error::OddDimension(dim));
        }
        let k = dim / 2;
        let rho = (0..k).map(|_| rng.gen_range(0.0..=0.01)).collect();
        let omega = (0..k)
            .map(|_| rng.gen_range(0.0..=std::f64::consts::PI))
            .collect();
        Self::new(rho, omega)
    }

    pub fn dim(&self) -> usize {
        2 * self.rho.len()
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn pair_maps(&self) -> Vec<PairMap> {
        self.rho
            .iter()
            .zip(&self.omega)
            .map(|(r, w)| {
                let s = r.exp();
                let (sin, cos) = w.sin_cos();
                PairMap {
                    a11: s * cos,
                    a12: -s * sin,
                    a21: s * sin,
                    a22: s * cos,
                }
            })
            .collect()
    }

    /// Dense `d × d` matrix.
    pub fn assemble(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut a = DMatrix::zeros(d, d);
        for (i, p) in self.pair_maps().iter().enumerate() {
            a[(2 * i, 2 * i)] = p.a11;
            a[(2 * i, 2 * i + 1)] = p.a12;
            a[(2 * i + 1, 2 * i)] = p.a21;
            a[(2 * i + 1, 2 * i + 1)] = p.a22;
        }
        a
    }

    /// `A·h` in O(d).
    pub fn apply(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("latent vector", self.dim(), h.len())?;
        let mut out = DVector::zeros(h.len());
        for (i, p) in self.pair_maps().iter().enumerate() {
            let (x, y) = p.apply((h[2 * i], h[2 * i + 1]));
            out[2 * i] = x;
            out[2 * i + 1] = y;
        }
        Ok(out)
    }

    /// |eigenvalues|, each block contributing exp(ρ) twice, sorted descending.
    pub fn eig_magnitudes(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.rho.iter().flat_map(|r| [r.exp(), r.exp()]).collect();
        out.sort_by(|a, b| b.total_cmp(a));
        out
    }

    pub fn spectrum_report(&self, bins: usize) -> Result<SpectrumReport> {
        SpectrumReport::from_magnitudes(&self.eig_magnitudes(), bins)
    }

    /// Dense map `(A, diag(exp(log_variance)))`.
    pub fn to_map(&self, noise: &DiagonalNoise) -> Result<LinearGaussianMap> {
        check_dim("noise dimension", self.dim(), noise.dim())?;
        Ok(LinearGaussianMap {
            matrix: self.assemble(),
            noise_cov: DMatrix::from_diagonal(&DVector::from_vec(noise.variances())),
        })
    }

    /// Predict step on a block-storage belief.
    pub fn push_belief(&self, g: &GaussianBelief, noise: &DiagonalNoise) -> Result<GaussianBelief> {
        check_dim("noise dimension", self.dim(), noise.dim())?;
        g.push_pairs(&self.pair_maps(), &noise.variances())
    }
}

/// Diagonal process noise stored as log-variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalNoise {
    pub log_variance: Vec<f64>,
}

impl DiagonalNoise {
    pub fn constant(dim: usize, log_variance: f64) -> Result<Self> {
        if !log_variance.is_finite() {
            return Err(Error::InvalidArgument("log-variance must be finite".into()));
        }
        Ok(DiagonalNoise {
            log_variance: vec![log_variance; dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.log_variance.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.log_variance.iter().map(|v| v.exp()).collect()
    }
}

/// Histogram of eigenvalue magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub max_abs_eig: f64,
}

impl SpectrumReport {
    /// Equal-width bins over `[min, max]`; the top edge is inclusive.
    pub fn from_magnitudes(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("bins must be ≥ 1".into()));
        }
        if values.is_empty() {
            return Err(Error::InvalidArgument("no eigenvalues".into()));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 0.0 };
        let edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            let idx = if width == 0.0 {
                0
            } else {
                (((v - lo) / width).floor() as usize).min(bins - 1)
            };
            counts[idx] += 1;
        }
        Ok(SpectrumReport {
            edges,
            counts,
            max_abs_eig: hi,
        })
    }

    /// Columns `bin_left,bin_right,count`, then a `max_abs_eig` summary row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_left,bin_right,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{},{}", self.edges[i], self.edges[i + 1], c)?;
        }
        writeln!(w, "max_abs_eig,,{}", self.max_abs_eig)?;
        Ok(())
    }
}
