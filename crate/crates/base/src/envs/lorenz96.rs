use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::rk4_integrate;
use crate::error::{Error, Result};

/// Saturation level of the quartic observation operator.
pub const QUARTIC_CAP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsKind {
    Direct,
    QuarticSaturating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lorenz96Config {
    pub n_grid: usize,
    pub forcing: f64,
    pub dt: f64,
    pub obs_kind: ObsKind,
    pub sigma: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

fn default_substeps() -> usize {
    4
}

fn default_burn_in() -> usize {
    200
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Lorenz96Config {
            n_grid: 40,
            forcing: 8.0,
            dt: 0.03,
            obs_kind: ObsKind::Direct,
            sigma: 1.0,
            substeps: default_substeps(),
            burn_in: default_burn_in(),
        }
    }
}

impl Lorenz96Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid < 4 {
            return Err(Error::Config(format!("Lorenz96 needs n_grid ≥ 4, got {}", self.n_grid)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("Lorenz96 dt must be > 0".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("Lorenz96 sigma must be ≥ 0".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn advance(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let f = self.forcing;
        rk4_integrate(|v| lorenz96_rhs(v, f), z, self.dt, self.substeps)
    }

    /// F plus a unit Gaussian perturbation, then `burn_in` steps.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let mut z = DVector::from_fn(self.n_grid, |_, _| {
            self.forcing + rng.sample::<f64, _>(StandardNormal)
        });
        for _ in 0..self.burn_in {
            z = self.advance(&z)?;
        }
        Ok(z)
    }
}

fn lorenz96_rhs(z: &DVector<f64>, forcing: f64) -> DVector<f64> {
    let n = z.len();
    DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let ip1 = if i + 1 == n { 0 } else { i + 1 };
            let im1 = if i == 0 { n - 1 } else { i - 1 };
            let im2 = (i + n - 2) % n;
            (z[ip1] - z[im2]) * z[im1] - z[i] + forcing
        }),
    )
}

/// dz_i/dt = (z_{i+1} − z_{i−2}) z_{i−1} − z_i + F with cyclic indices.
pub fn lorenz96_deriv(z: &DVector<f64>, forcing: f64) -> Result<DVector<f64>> {
    if z.len() < 4 {
        return Err(Error::Config(format!("Lorenz96 needs N ≥ 4, got {}", z.len())));
    }
    Ok(lorenz96_rhs(z, forcing))
}

/// Noiseless observation operator.
pub fn lorenz96_observe_mean(z: &DVector<f64>, kind: ObsKind) -> DVector<f64> {
    match kind {
        ObsKind::Direct => z.clone(),
        ObsKind::QuarticSaturating => z.map(|v| v.powi(4).min(QUARTIC_CAP)),
    }
}

pub fn lorenz96_observe<R: Rng + ?Sized>(z: &DVector<f64>, cfg: &Lorenz96Config, rng: &mut R) -> DVector<f64> {
    let mut o = lorenz96_observe_mean(z, cfg.obs_kind);
    if cfg.sigma > 0.0 {
        for v in o.iter_mut() {
            *v += cfg.sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    o
}
