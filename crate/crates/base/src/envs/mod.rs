//! Benchmark state-space environments.

mod integrate;

pub mod bounce;
pub mod lorenz96;
pub mod pendulum;
pub mod trajectory;

pub use bounce::{bounce_reflect, constant_velocity_map, BouncePatchConfig};
pub use integrate::rk4_integrate;
pub use lorenz96::{lorenz96_deriv, lorenz96_observe, Lorenz96Config, ObsKind};
pub use pendulum::{pendulum_deriv, pendulum_observe, wrap_angle, PendulumState};
pub use trajectory::{generate, generate_range, generate_tail, substream, BatchManifest, TrajectoryBatch};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// A simulated state-space model: initial distribution, transition and
/// noisy observation operator.
pub trait StateSpace: Send + Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn sample_initial(&self, rng: &mut dyn RngCore) -> Result<DVector<f64>>;
    /// One transition of the model dynamics, including any process noise.
    fn propagate(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>>;
    fn observe_mean(&self, z: &DVector<f64>) -> DVector<f64>;
    fn obs_noise_cov(&self) -> DMatrix<f64>;
    fn observe(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>>;

    /// Canonical representative of a state (angles folded into (−π, π]).
    fn canonicalize(&self, z: DVector<f64>) -> DVector<f64> {
        z
    }

    /// State dimensions that are angles.
    fn angle_dims(&self) -> Vec<usize> {
        Vec::new()
    }

    fn advance(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(self.canonicalize(self.propagate(z, rng)?))
    }
}

fn add_isotropic_noise(mut o: DVector<f64>, sigma: f64, rng: &mut dyn RngCore) -> DVector<f64> {
    if sigma > 0.0 {
        for v in o.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    o
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumConfig {
    pub dt: f64,
    pub sigma: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Initial angular velocities are uniform in ±omega_range.
    #[serde(default = "default_omega_range")]
    pub omega_range: f64,
}

fn default_substeps() -> usize {
    4
}

fn default_omega_range() -> f64 {
    1.0
}

impl Default for PendulumConfig {
    fn default() -> Self {
        PendulumConfig {
            dt: 0.03,
            sigma: 0.1,
            substeps: default_substeps(),
            omega_range: default_omega_range(),
        }
    }
}

impl StateSpace for PendulumConfig {
    fn state_dim(&self) -> usize {
        4
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        use std::f64::consts::PI;
        let t1 = wrap_angle(rng.gen_range(-PI..PI));
        let t2 = wrap_angle(rng.gen_range(-PI..PI));
        let w1 = rng.gen_range(-self.omega_range..=self.omega_range);
        let w2 = rng.gen_range(-self.omega_range..=self.omega_range);
        Ok(DVector::from_vec(vec![t1, t2, w1, w2]))
    }

    fn propagate(&self, z: &DVector<f64>, _rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        pendulum::pendulum_advance(z, self.dt, self.substeps)
    }

    fn observe_mean(&self, z: &DVector<f64>) -> DVector<f64> {
        pendulum::pendulum_positions(&PendulumState::from_slice(z.as_slice()))
    }

    fn obs_noise_cov(&self) -> DMatrix<f64> {
        DMatrix::identity(4, 4) * (self.sigma * self.sigma)
    }

    fn observe(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(add_isotropic_noise(self.observe_mean(z), self.sigma, rng))
    }

    fn canonicalize(&self, mut z: DVector<f64>) -> DVector<f64> {
        z[0] = wrap_angle(z[0]);
        z[1] = wrap_angle(z[1]);
        z
    }

    fn angle_dims(&self) -> Vec<usize> {
        vec![0, 1]
    }
}

impl StateSpace for Lorenz96Config {
    fn state_dim(&self) -> usize {
        self.n_grid
    }

    fn obs_dim(&self) -> usize {
        self.n_grid
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Lorenz96Config::sample_initial(self, rng)
    }

    fn propagate(&self, z: &DVector<f64>, _rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        self.advance(z)
    }

    fn observe_mean(&self, z: &DVector<f64>) -> DVector<f64> {
        lorenz96::lorenz96_observe_mean(z, self.obs_kind)
    }

    fn obs_noise_cov(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n_grid, self.n_grid) * (self.sigma * self.sigma)
    }

    fn observe(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(add_isotropic_noise(self.observe_mean(z), self.sigma, rng))
    }
}

impl StateSpace for BouncePatchConfig {
    fn state_dim(&self) -> usize {
        BouncePatchConfig::state_dim(self)
    }

    fn obs_dim(&self) -> usize {
        BouncePatchConfig::obs_dim(self)
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(BouncePatchConfig::sample_initial(self, rng))
    }

    fn propagate(&self, z: &DVector<f64>, _rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        let map = constant_velocity_map(self.dt, self.n_objects, 0.0)?;
        Ok(&map.matrix * z)
    }

    fn observe_mean(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.render(z.as_slice()))
    }

    fn obs_noise_cov(&self) -> DMatrix<f64> {
        let n = self.obs_dim();
        DMatrix::identity(n, n) * (self.sigma * self.sigma)
    }

    fn observe(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(add_isotropic_noise(self.observe_mean(z), self.sigma, rng))
    }
}

/// Linear-Gaussian state-space model `z' = A z + w`, `o = H z + v`.
/// Matrices are stored row-major as nested vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgssmConfig {
    pub a: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub init_mean: Vec<f64>,
    pub init_cov: Vec<Vec<f64>>,
}

pub fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

pub fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn sample_noise(cov: &DMatrix<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
    let n = cov.nrows();
    if cov.iter().all(|v| *v == 0.0) {
        return Ok(DVector::zeros(n));
    }
    let l = linalg::chol(cov)?;
    let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(l * eps)
}

impl LgssmConfig {
    pub fn matrices(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (
            to_matrix(&self.a),
            to_matrix(&self.q),
            to_matrix(&self.h),
            to_matrix(&self.r),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.init_mean.len();
        let (a, q, h, r) = self.matrices();
        check_dim("A rows", d, a.nrows())?;
        check_dim("A cols", d, a.ncols())?;
        check_dim("Q rows", d, q.nrows())?;
        check_dim("H cols", d, h.ncols())?;
        check_dim("R rows", h.nrows(), r.nrows())?;
        linalg::chol(&r)?;
        linalg::chol(&to_matrix(&self.init_cov))?;
        Ok(())
    }

    /// Random model with a contracting A, SPD noise and a well-conditioned
    /// square H.
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let rand_mat = |rng: &mut R| DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let spd = |rng: &mut R, floor: f64| {
            let b = rand_mat(rng) * 0.5;
            linalg::symmetrize(&(&b * b.transpose() + DMatrix::identity(d, d) * floor))
        };
        let mut a = rand_mat(rng);
        let radius = a
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        a *= rng.gen_range(0.6..1.05) / radius.max(1e-12);
        let mut h = rand_mat(rng);
        for i in 0..d {
            h[(i, i)] += if h[(i, i)] >= 0.0 { 1.5 } else { -1.5 };
        }
        LgssmConfig {
            a: from_matrix(&a),
            q: from_matrix(&spd(rng, 0.1)),
            h: from_matrix(&h),
            r: from_matrix(&spd(rng, 0.2)),
            init_mean: vec![0.0; d],
            init_cov: from_matrix(&(DMatrix::identity(d, d) * 100.0)),
        }
    }

    /// One-dimensional random walk observed with unit noise.
    pub fn scalar(a: f64, q: f64, h: f64, r: f64) -> Self {
        LgssmConfig {
            a: vec![vec![a]],
            q: vec![vec![q]],
            h: vec![vec![h]],
            r: vec![vec![r]],
            init_mean: vec![0.0],
            init_cov: vec![vec![100.0]],
        }
    }
}

impl StateSpace for LgssmConfig {
    fn state_dim(&self) -> usize {
        self.init_mean.len()
    }

    fn obs_dim(&self) -> usize {
        self.h.len()
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        let noise = sample_noise(&to_matrix(&self.init_cov), rng)?;
        Ok(DVector::from_column_slice(&self.init_mean) + noise)
    }

    fn propagate(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(to_matrix(&self.a) * z + sample_noise(&to_matrix(&self.q), rng)?)
    }

    fn observe_mean(&self, z: &DVector<f64>) -> DVector<f64> {
        to_matrix(&self.h) * z
    }

    fn obs_noise_cov(&self) -> DMatrix<f64> {
        to_matrix(&self.r)
    }

    fn observe(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(self.observe_mean(z) + sample_noise(&to_matrix(&self.r), rng)?)
    }
}

/// Any of the benchmark environments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "kebab-case")]
pub enum EnvConfig {
    Pendulum(PendulumConfig),
    Lorenz96(Lorenz96Config),
    BouncePatch(BouncePatchConfig),
    Lgssm(LgssmConfig),
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Pendulum(_) => "pendulum",
            EnvConfig::Lorenz96(_) => "lorenz96",
            EnvConfig::BouncePatch(_) => "bounce-patch",
            EnvConfig::Lgssm(_) => "lgssm",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnvConfig::Pendulum(c) => {
                if !(c.dt > 0.0) || !(c.sigma >= 0.0) || c.substeps == 0 {
                    return Err(Error::Config("pendulum needs dt > 0, sigma ≥ 0, substeps ≥ 1".into()));
                }
                Ok(())
            }
            EnvConfig::Lorenz96(c) => c.validate(),
            EnvConfig::BouncePatch(c) => c.validate(),
            EnvConfig::Lgssm(c) => c.validate(),
        }
    }

    pub fn space(&self) -> &dyn StateSpace {
        match self {
            EnvConfig::Pendulum(c) => c,
            EnvConfig::Lorenz96(c) => c,
            EnvConfig::BouncePatch(c) => c,
            EnvConfig::Lgssm(c) => c,
        }
    }
}
