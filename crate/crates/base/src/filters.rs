//! Classic assimilation baselines: the exact Kalman filter, stochastic and
//! transform ensemble Kalman filters, and the bootstrap particle filter.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::envs::pendulum::wrap_angle;
use crate::error::{check_dim, Error, Result};
use crate::gauss::{info_combine, GaussianBelief, InfoTerm, LinearGaussianMap, SymMatrix};
use crate::linalg;

// ---------------------------------------------------------------- Kalman

/// Information-form measurement update of a predicted belief.
pub fn kf_update(pred: &GaussianBelief, obs: &LinearGaussianMap, o: &DVector<f64>) -> Result<GaussianBelief> {
    check_dim("observation operator input", pred.dim(), obs.in_dim())?;
    check_dim("observation", obs.out_dim(), o.len())?;
    let h = &obs.matrix;
    let lr = linalg::chol(&obs.noise_cov)?;
    let rinv_h = linalg::chol_solve_matrix(&lr, h);
    let precision = linalg::symmetrize(&(h.transpose() * &rinv_h));
    let shift = rinv_h.transpose() * o;
    let pred = pred.to_dense();
    info_combine(&[
        InfoTerm::from_belief(&pred)?,
        InfoTerm {
            precision: SymMatrix::Dense(precision),
            shift,
        },
    ])
}

/// Predict with `dyn_map`, then update with observation `o`.
pub fn kf_step(
    belief: &GaussianBelief,
    dyn_map: &LinearGaussianMap,
    obs: &LinearGaussianMap,
    o: &DVector<f64>,
) -> Result<GaussianBelief> {
    kf_update(&belief.pushforward(dyn_map)?, obs, o)
}

/// Gain-form step, `K = P Hᵀ (H P Hᵀ + R)⁻¹`. Kept as an independent check on
/// the information form.
pub fn kf_step_gain(
    belief: &GaussianBelief,
    dyn_map: &LinearGaussianMap,
    obs: &LinearGaussianMap,
    o: &DVector<f64>,
) -> Result<GaussianBelief> {
    let pred = belief.pushforward(dyn_map)?;
    let p = pred.dense_cov();
    let h = &obs.matrix;
    let s = linalg::symmetrize(&(h * &p * h.transpose() + &obs.noise_cov));
    let ls = linalg::chol(&s)?;
    let gain = linalg::chol_solve_matrix(&ls, &(h * &p)).transpose();
    let mean = pred.mean() + &gain * (o - h * pred.mean());
    let d = p.nrows();
    let ikh = DMatrix::identity(d, d) - &gain * h;
    // Joseph form keeps the result symmetric PD
    let cov = &ikh * &p * ikh.transpose() + &gain * &obs.noise_cov * gain.transpose();
    GaussianBelief::dense(mean, linalg::symmetrize(&cov))
}

/// Filters a whole sequence. The first observation updates `init` directly;
/// every later one follows a predict.
pub fn kf_filter(
    init: &GaussianBelief,
    dyn_map: &LinearGaussianMap,
    obs: &LinearGaussianMap,
    observations: &[DVector<f64>],
) -> Result<Vec<GaussianBelief>> {
    let mut out: Vec<GaussianBelief> = Vec::with_capacity(observations.len());
    for (t, o) in observations.iter().enumerate() {
        let next = if t == 0 {
            kf_update(init, obs, o)?
        } else {
            kf_step(&out[t - 1], dyn_map, obs, o)?
        };
        out.push(next);
    }
    Ok(out)
}

// ---------------------------------------------------------------- shared helpers

/// Circular mean of angles, in (−π, π].
pub fn circular_mean(angles: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (a, w) in angles {
        s += w * a.sin();
        c += w * a.cos();
    }
    wrap_angle(s.atan2(c))
}

fn propagate_all<F>(members: &[DVector<f64>], propagate: &F, rng: &mut dyn RngCore) -> Result<Vec<DVector<f64>>>
where
    F: Fn(&DVector<f64>, &mut dyn RngCore) -> Result<DVector<f64>> + Sync,
{
    // one child stream per member keeps results independent of thread count
    let base = rng.next_u64();
    members
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let mut r = ChaCha8Rng::seed_from_u64(base);
            r.set_stream(i as u64);
            propagate(z, &mut r)
        })
        .collect()
}

// ---------------------------------------------------------------- ensembles

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOptions {
    /// Multiplier on forecast anomalies (1 = no inflation).
    pub inflation: f64,
    /// State dimensions holding angles. Members are unwrapped around the
    /// circular mean before an update and wrapped after it.
    pub angle_dims: Vec<usize>,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        EnsembleOptions {
            inflation: 1.0,
            angle_dims: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Vec<DVector<f64>>,
}

impl Ensemble {
    pub fn new(members: Vec<DVector<f64>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let d = members[0].len();
        for m in &members {
            check_dim("ensemble member", d, m.len())?;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite ensemble member".into()));
            }
        }
        Ok(Ensemble { members })
    }

    pub fn from_belief<R: Rng + ?Sized>(belief: &GaussianBelief, n: usize, rng: &mut R) -> Result<Self> {
        let s = belief.sample(n, rng)?;
        Ensemble::new(s.row_iter().map(|r| r.transpose()).collect())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    pub fn members(&self) -> &[DVector<f64>] {
        &self.members
    }

    /// Members as an `n_ens × d` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim(), |i, j| self.members[i][j])
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for x in &self.members {
            m += x;
        }
        m / self.len() as f64
    }

    /// Mean with angle dimensions averaged on the circle.
    pub fn mean_with_angles(&self, angle_dims: &[usize]) -> DVector<f64> {
        let mut m = self.mean();
        for &k in angle_dims {
            m[k] = circular_mean(self.members.iter().map(|x| (x[k], 1.0)));
        }
        m
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let x = self.anomalies();
        &x * x.transpose() / (self.len() - 1) as f64
    }

    /// `d × n` matrix of deviations from the mean.
    pub fn anomalies(&self) -> DMatrix<f64> {
        let m = self.mean();
        DMatrix::from_fn(self.dim(), self.len(), |i, j| self.members[j][i] - m[i])
    }

    pub fn forecast<F>(&self, propagate: &F, rng: &mut dyn RngCore) -> Result<Ensemble>
    where
        F: Fn(&DVector<f64>, &mut dyn RngCore) -> Result<DVector<f64>> + Sync,
    {
        Ensemble::new(propagate_all(&self.members, propagate, rng)?)
    }

    fn prepared(&self, opts: &EnsembleOptions) -> Ensemble {
        let mut members = self.members.clone();
        for &k in &opts.angle_dims {
            let c = circular_mean(members.iter().map(|x| (x[k], 1.0)));
            for x in members.iter_mut() {
                x[k] = c + wrap_angle(x[k] - c);
            }
        }
        let mut ens = Ensemble { members };
        if opts.inflation != 1.0 {
            let m = ens.mean();
            for x in ens.members.iter_mut() {
                *x = &m + (&*x - &m) * opts.inflation;
            }
        }
        ens
    }

    fn finished(mut self, opts: &EnsembleOptions) -> Ensemble {
        for &k in &opts.angle_dims {
            for x in self.members.iter_mut() {
                x[k] = wrap_angle(x[k]);
            }
        }
        self
    }
}

struct ObsSpread {
    /// h applied to each member, as columns.
    predicted: DMatrix<f64>,
    mean: DVector<f64>,
    anomalies: DMatrix<f64>,
}

fn obs_spread<H>(ens: &Ensemble, h: &H) -> ObsSpread
where
    H: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let cols: Vec<DVector<f64>> = ens.members.par_iter().map(h).collect();
    let predicted = DMatrix::from_columns(&cols);
    let n = cols.len() as f64;
    let mean = predicted.column_sum() / n;
    let mut anomalies = predicted.clone();
    for mut c in anomalies.column_iter_mut() {
        c -= &mean;
    }
    ObsSpread {
        predicted,
        mean,
        anomalies,
    }
}

fn check_spread(x: &DMatrix<f64>) -> Result<()> {
    if x.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroSpread);
    }
    Ok(())
}

/// Stochastic (perturbed-observation) ensemble Kalman analysis.
pub fn enkf_update<H>(
    ens: &Ensemble,
    h: &H,
    r: &DMatrix<f64>,
    o: &DVector<f64>,
    opts: &EnsembleOptions,
    rng: &mut dyn RngCore,
) -> Result<Ensemble>
where
    H: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let ens = ens.prepared(opts);
    let n = ens.len();
    let x = ens.anomalies();
    check_spread(&x)?;
    let y = obs_spread(&ens, h);
    check_dim("observation", y.mean.len(), o.len())?;
    let scale = 1.0 / (n - 1) as f64;
    let pxy = &x * y.anomalies.transpose() * scale;
    let s = linalg::symmetrize(&(&y.anomalies * y.anomalies.transpose() * scale + r));
    let ls = linalg::chol(&s)?;
    let gain = linalg::chol_solve_matrix(&ls, &pxy.transpose()).transpose();
    let lr = linalg::chol(r)?;
    let p = o.len();
    let members = ens
        .members
        .iter()
        .enumerate()
        .map(|(i, xi)| {
            let eps = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let innov = o + &lr * eps - y.predicted.column(i);
            xi + &gain * innov
        })
        .collect();
    Ok(Ensemble::new(members)?.finished(opts))
}

/// Ensemble transform (symmetric square-root) analysis.
pub fn etkf_update<H>(
    ens: &Ensemble,
    h: &H,
    r: &DMatrix<f64>,
    o: &DVector<f64>,
    opts: &EnsembleOptions,
) -> Result<Ensemble>
where
    H: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let ens = ens.prepared(opts);
    let n = ens.len();
    let nm1 = (n - 1) as f64;
    let x = ens.anomalies();
    check_spread(&x)?;
    let y = obs_spread(&ens, h);
    check_dim("observation", y.mean.len(), o.len())?;
    let lr = linalg::chol(r)?;
    // whitened observation anomalies Ŷ = L⁻¹Y, with R = LLᵀ
    let yw = DMatrix::from_columns(
        &y.anomalies
            .column_iter()
            .map(|c| linalg::solve_lower(&lr, &c.into_owned()))
            .collect::<Vec<_>>(),
    );
    let dw = linalg::solve_lower(&lr, &(o - &y.mean));
    let p = yw.nrows();
    let mean = ens.mean();
    let (w_mean, anomalies) = if p <= n {
        // Ŷ Ŷᵀ = U Λ Uᵀ and V = Ŷᵀ U Λ^{-1/2} span the only directions where
        // (n−1)I + ŶᵀŶ differs from (n−1)I, so the transform is
        // W = I + V diag(√((n−1)/(n−1+λ)) − 1) Vᵀ
        let eig = SymmetricEigen::new(linalg::symmetrize(&(&yw * yw.transpose())));
        let lam_max = eig.eigenvalues.max().max(0.0);
        let keep: Vec<usize> = (0..p).filter(|&k| eig.eigenvalues[k] > 1e-12 * lam_max.max(1.0)).collect();
        let u = DMatrix::from_columns(&keep.iter().map(|&k| eig.eigenvectors.column(k).into_owned()).collect::<Vec<_>>());
        let lam: Vec<f64> = keep.iter().map(|&k| eig.eigenvalues[k]).collect();
        let mut v = yw.transpose() * &u;
        for (j, l) in lam.iter().enumerate() {
            v.column_mut(j).scale_mut(1.0 / l.sqrt());
        }
        // w̄ = Ŷᵀ((n−1)I + ŶŶᵀ)⁻¹ d̃
        let ud = u.transpose() * &dw;
        let scaled = DVector::from_fn(lam.len(), |j, _| ud[j] / (nm1 + lam[j]));
        let w_mean = yw.transpose() * (&u * scaled);
        let xv = &x * &v;
        let shrink = DMatrix::from_diagonal(&DVector::from_iterator(
            lam.len(),
            lam.iter().map(|l| (nm1 / (nm1 + l)).sqrt() - 1.0),
        ));
        let anomalies = &x + xv * shrink * v.transpose();
        (w_mean, anomalies)
    } else {
        let a = linalg::symmetrize(&(DMatrix::identity(n, n) * nm1 + yw.transpose() * &yw));
        let eig = SymmetricEigen::new(a);
        if eig.eigenvalues.iter().any(|l| *l <= 0.0) {
            return Err(Error::NotPositiveDefinite {
                pivot: 0,
                value: eig.eigenvalues.min(),
            });
        }
        let u = &eig.eigenvectors;
        let inv = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| (nm1 / l).sqrt()));
        let w_mean = u * inv * u.transpose() * (yw.transpose() * &dw);
        (w_mean, &x * (u * inv_sqrt * u.transpose()))
    };
    let shift = &mean + &x * w_mean;
    let members = (0..n).map(|i| &shift + anomalies.column(i)).collect();
    Ok(Ensemble::new(members)?.finished(opts))
}

pub fn enkf_step<F, H>(
    ens: &Ensemble,
    propagate: &F,
    h: &H,
    r: &DMatrix<f64>,
    o: &DVector<f64>,
    opts: &EnsembleOptions,
    rng: &mut dyn RngCore,
) -> Result<Ensemble>
where
    F: Fn(&DVector<f64>, &mut dyn RngCore) -> Result<DVector<f64>> + Sync,
    H: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let fc = ens.forecast(propagate, rng)?;
    enkf_update(&fc, h, r, o, opts, rng)
}

pub fn etkf_step<F, H>(
    ens: &Ensemble,
    propagate: &F,
    h: &H,
    r: &DMatrix<f64>,
    o: &DVector<f64>,
    opts: &EnsembleOptions,
    rng: &mut dyn RngCore,
) -> Result<Ensemble>
where
    F: Fn(&DVector<f64>, &mut dyn RngCore) -> Result<DVector<f64>> + Sync,
    H: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let fc = ens.forecast(propagate, rng)?;
    etkf_update(&fc, h, r, o, opts)
}

// ---------------------------------------------------------------- particles

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    particles: Vec<DVector<f64>>,
    /// Normalised so that their log-sum-exp is 0.
    log_weights: Vec<f64>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl ParticleSet {
    pub fn new(particles: Vec<DVector<f64>>, log_weights: Vec<f64>) -> Result<Self> {
        if particles.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a particle set needs at least 2 particles, got {}",
                particles.len()
            )));
        }
        check_dim("log-weights", particles.len(), log_weights.len())?;
        let lse = log_sum_exp(&log_weights);
        if !lse.is_finite() {
            return Err(Error::ParticleCollapse);
        }
        Ok(ParticleSet {
            particles,
            log_weights: log_weights.iter().map(|w| w - lse).collect(),
        })
    }

    pub fn uniform(particles: Vec<DVector<f64>>) -> Result<Self> {
        let n = particles.len();
        ParticleSet::new(particles, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// Effective sample size `1 / Σ wᵢ²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights().iter().map(|w| w * w).sum::<f64>()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.particles[0].len());
        for (x, w) in self.particles.iter().zip(self.weights()) {
            m += x * w;
        }
        m
    }

    pub fn mean_with_angles(&self, angle_dims: &[usize]) -> DVector<f64> {
        let mut m = self.mean();
        let w = self.weights();
        for &k in angle_dims {
            m[k] = circular_mean(self.particles.iter().zip(&w).map(|(x, w)| (x[k], *w)));
        }
        m
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let d = m.len();
        let mut c = DMatrix::zeros(d, d);
        for (x, w) in self.particles.iter().zip(self.weights()) {
            let dx = x - &m;
            c += &dx * dx.transpose() * w;
        }
        c
    }

    /// Systematic resampling with a single uniform offset.
    pub fn resample(&self, rng: &mut dyn RngCore) -> ParticleSet {
        let n = self.len();
        let w = self.weights();
        let u0: f64 = rng.gen::<f64>() / n as f64;
        let mut out = Vec::with_capacity(n);
        let mut cum = w[0];
        let mut j = 0;
        for i in 0..n {
            let u = u0 + i as f64 / n as f64;
            while u > cum && j < n - 1 {
                j += 1;
                cum += w[j];
            }
            out.push(self.particles[j].clone());
        }
        let lw = -(n as f64).ln();
        ParticleSet {
            particles: out,
            log_weights: vec![lw; n],
        }
    }
}

/// Bootstrap step: propagate, reweight by the likelihood of `o`, then
/// resample systematically when the ESS falls below `threshold · n_p`.
pub fn pf_step<F, L>(
    ps: &ParticleSet,
    propagate: Option<&F>,
    log_lik: &L,
    o: &DVector<f64>,
    threshold: f64,
    rng: &mut dyn RngCore,
) -> Result<ParticleSet>
where
    F: Fn(&DVector<f64>, &mut dyn RngCore) -> Result<DVector<f64>> + Sync,
    L: Fn(&DVector<f64>, &DVector<f64>) -> f64 + Sync,
{
    let particles = match propagate {
        Some(f) => propagate_all(&ps.particles, f, rng)?,
        None => ps.particles.clone(),
    };
    let ll: Vec<f64> = particles.par_iter().map(|x| log_lik(x, o)).collect();
    let lw: Vec<f64> = ps.log_weights.iter().zip(&ll).map(|(w, l)| w + l).collect();
    let next = ParticleSet::new(particles, lw)?;
    if next.ess() < threshold * next.len() as f64 {
        Ok(next.resample(rng))
    } else {
        Ok(next)
    }
}

/// Log-density of `N(o; h(z), R)`, precomputing the factor of R.
pub struct GaussianLikelihood {
    l: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianLikelihood {
    pub fn new(r: &DMatrix<f64>) -> Result<Self> {
        let l = linalg::chol(r)?;
        let log_norm = -0.5 * (r.nrows() as f64 * (2.0 * PI).ln() + linalg::chol_logdet(&l));
        Ok(GaussianLikelihood { l, log_norm })
    }

    pub fn log_density(&self, predicted: &DVector<f64>, o: &DVector<f64>) -> f64 {
        let r = linalg::solve_lower(&self.l, &(o - predicted));
        self.log_norm - 0.5 * r.norm_squared()
    }
}
