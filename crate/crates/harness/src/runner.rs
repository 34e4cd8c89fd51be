//! Runs one filter over a test set and collects physical-state estimates,
//! plus samples when a calibration metric asks for them.

use std::time::Instant;

use dbf_base::envs::bounce::{bounce_reflect, bounce_reflect_slope};
use dbf_base::envs::{to_matrix, EnvConfig, StateSpace, TrajectoryBatch};
use dbf_base::filters::{enkf_update, etkf_update, kf_filter, pf_step, Ensemble, EnsembleOptions, GaussianLikelihood, ParticleSet};
use dbf_base::gauss::{GaussianBelief, LinearGaussianMap};
use dbf_core::DbfModel;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{EnsembleSpec, FilterSpec, ParticleSpec};
use crate::error::{HarnessError, Result};

/// Estimates of one filter on every test trajectory.
#[derive(Clone, Debug)]
pub struct FilterRun {
    pub filter: String,
    /// `means[i][t]`: point estimate of the physical state.
    pub means: Vec<Vec<DVector<f64>>>,
    /// `samples[i][t]`: `n × d_z` draws from the filtering distribution.
    pub samples: Option<Vec<Vec<DMatrix<f64>>>>,
    /// Latent beliefs (DBF) or state beliefs (KF).
    pub beliefs: Option<Vec<Vec<GaussianBelief>>>,
    pub inference_secs: f64,
}

/// Deterministic seed for a named stage of a run.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const TAG_TEST: u64 = 1;
pub const TAG_TRAIN: u64 = 2;
pub const TAG_FILTER: u64 = 3;
pub const TAG_INIT: u64 = 4;

fn traj_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(i as u64);
    r
}

fn truths(test: &TrajectoryBatch) -> Vec<Vec<DVector<f64>>> {
    (0..test.count()).map(|i| test.state_sequence(i)).collect()
}

/// Ground-truth state sequences of a test batch.
pub fn truth_sequences(test: &TrajectoryBatch) -> Vec<Vec<DVector<f64>>> {
    truths(test)
}

/// Runs a classic baseline (KF, EnKF, ETKF or PF). `n_samples > 0` also
/// keeps that many draws per step.
pub fn run_classic(spec: &FilterSpec, env: &EnvConfig, test: &TrajectoryBatch, n_samples: usize, seed: u64) -> Result<FilterRun> {
    let start = Instant::now();
    let per_traj: Vec<Result<Traj>> = match spec {
        FilterSpec::Kf => (0..test.count()).map(|i| run_kf(env, test, i, n_samples, seed)).collect(),
        FilterSpec::Enkf(e) => (0..test.count()).map(|i| run_ensemble(e, false, env, test, i, n_samples, seed)).collect(),
        FilterSpec::Etkf(e) => (0..test.count()).map(|i| run_ensemble(e, true, env, test, i, n_samples, seed)).collect(),
        FilterSpec::Pf(p) => (0..test.count()).map(|i| run_pf(p, env, test, i, n_samples, seed)).collect(),
        FilterSpec::Dbf(_) => return Err(HarnessError::Config("dbf is not a classic filter".into())),
    };
    let mut run = FilterRun {
        filter: spec.name().into(),
        means: Vec::new(),
        samples: (n_samples > 0).then(Vec::new),
        beliefs: matches!(spec, FilterSpec::Kf).then(Vec::new),
        inference_secs: 0.0,
    };
    for t in per_traj {
        let t = t?;
        run.means.push(t.means);
        if let (Some(all), Some(s)) = (run.samples.as_mut(), t.samples) {
            all.push(s);
        }
        if let (Some(all), Some(b)) = (run.beliefs.as_mut(), t.beliefs) {
            all.push(b);
        }
    }
    run.inference_secs = start.elapsed().as_secs_f64();
    Ok(run)
}

struct Traj {
    means: Vec<DVector<f64>>,
    samples: Option<Vec<DMatrix<f64>>>,
    beliefs: Option<Vec<GaussianBelief>>,
}

fn run_kf(env: &EnvConfig, test: &TrajectoryBatch, i: usize, n_samples: usize, seed: u64) -> Result<Traj> {
    let EnvConfig::Lgssm(c) = env else {
        return Err(HarnessError::Config("the Kalman filter needs a linear-Gaussian environment".into()));
    };
    let (a, q, h, r) = c.matrices();
    let init = GaussianBelief::dense(DVector::from_column_slice(&c.init_mean), to_matrix(&c.init_cov))?;
    let beliefs = kf_filter(&init, &LinearGaussianMap::new(a, q)?, &LinearGaussianMap::new(h, r)?, &test.obs_sequence(i))?;
    let means = beliefs.iter().map(|b| b.mean().clone()).collect();
    let samples = if n_samples > 0 {
        let mut rng = traj_rng(seed, i);
        Some(beliefs.iter().map(|b| b.sample(n_samples, &mut rng)).collect::<dbf_base::Result<Vec<_>>>()?)
    } else {
        None
    };
    Ok(Traj {
        means,
        samples,
        beliefs: Some(beliefs),
    })
}

/// The environment's transition plus optional isotropic jitter.
fn propagator(space: &dyn StateSpace, jitter: f64) -> impl Fn(&DVector<f64>, &mut dyn RngCore) -> dbf_base::Result<DVector<f64>> + Sync + '_ {
    move |z, rng| {
        let mut next = space.propagate(z, rng)?;
        if jitter > 0.0 {
            for v in next.iter_mut() {
                *v += jitter * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(space.canonicalize(next))
    }
}

fn initial_members(space: &dyn StateSpace, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<DVector<f64>>> {
    // one child stream per member, drawn in parallel
    let base = rng.next_u64();
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut r = traj_rng(base, k);
            Ok(space.canonicalize(space.sample_initial(&mut r)?))
        })
        .collect()
}

fn member_rows(members: &[DVector<f64>], n: usize) -> DMatrix<f64> {
    let n = n.min(members.len());
    DMatrix::from_fn(n, members[0].len(), |i, j| members[i][j])
}

fn run_ensemble(spec: &EnsembleSpec, transform: bool, env: &EnvConfig, test: &TrajectoryBatch, i: usize, n_samples: usize, seed: u64) -> Result<Traj> {
    let space = env.space();
    let mut rng = traj_rng(seed, i);
    let opts = EnsembleOptions {
        inflation: spec.inflation,
        angle_dims: space.angle_dims(),
    };
    let prop = propagator(space, spec.process_noise);
    let h = |z: &DVector<f64>| space.observe_mean(z);
    let r = space.obs_noise_cov();
    let mut ens = Ensemble::new(initial_members(space, spec.n_ens, &mut rng)?)?;
    let mut means = Vec::with_capacity(test.steps());
    let mut samples = (n_samples > 0).then(Vec::new);
    for (t, o) in test.obs_sequence(i).iter().enumerate() {
        if t > 0 {
            ens = ens.forecast(&prop, &mut rng)?;
        }
        ens = if transform {
            etkf_update(&ens, &h, &r, o, &opts)?
        } else {
            enkf_update(&ens, &h, &r, o, &opts, &mut rng)?
        };
        means.push(ens.mean_with_angles(&opts.angle_dims));
        if let Some(s) = samples.as_mut() {
            s.push(member_rows(ens.members(), n_samples));
        }
    }
    Ok(Traj {
        means,
        samples,
        beliefs: None,
    })
}

fn run_pf(spec: &ParticleSpec, env: &EnvConfig, test: &TrajectoryBatch, i: usize, n_samples: usize, seed: u64) -> Result<Traj> {
    let space = env.space();
    let mut rng = traj_rng(seed, i);
    let prop = propagator(space, spec.process_noise);
    let lik = GaussianLikelihood::new(&space.obs_noise_cov())?;
    let loglik = |z: &DVector<f64>, o: &DVector<f64>| lik.log_density(&space.observe_mean(z), o);
    let angles = space.angle_dims();
    let mut ps = ParticleSet::uniform(initial_members(space, spec.n_particles, &mut rng)?)?;
    let mut means = Vec::with_capacity(test.steps());
    let mut samples = (n_samples > 0).then(Vec::new);
    for (t, o) in test.obs_sequence(i).iter().enumerate() {
        ps = pf_step(&ps, (t > 0).then_some(&prop), &loglik, o, spec.resample_threshold, &mut rng)?;
        means.push(ps.mean_with_angles(&angles));
        if let Some(s) = samples.as_mut() {
            s.push(weighted_draws(&ps, n_samples, &mut rng));
        }
    }
    Ok(Traj {
        means,
        samples,
        beliefs: None,
    })
}

/// `n` independent draws from a weighted particle set.
fn weighted_draws(ps: &ParticleSet, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let w = ps.weights();
    let mut cdf = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for x in &w {
        acc += x;
        cdf.push(acc);
    }
    let d = ps.particles()[0].len();
    let mut out = DMatrix::zeros(n, d);
    for r in 0..n {
        let u = rng.gen::<f64>() * acc;
        let k = cdf.partition_point(|c| *c < u).min(w.len() - 1);
        out.set_row(r, &ps.particles()[k].transpose());
    }
    out
}

/// Physical state of a bouncing-patch latent `(x, vx, y, vy, …)`: positions
/// folded into the frame, velocities sign-flipped with the fold.
pub fn bounce_physical(h: &DVector<f64>, n_objects: usize, period: f64) -> DVector<f64> {
    let half = 2 * n_objects;
    let mut z = DVector::zeros(2 * half);
    for k in 0..half {
        let (x, v) = (h[2 * k], h[2 * k + 1]);
        z[k] = bounce_reflect(x, period);
        z[half + k] = v * bounce_reflect_slope(x, period);
    }
    z
}

/// Runs a trained model. `ioo_only` drops the dynamics and decodes `f(o_t)`.
pub fn run_dbf(model: &DbfModel, env: &EnvConfig, test: &TrajectoryBatch, ioo_only: bool, n_samples: usize, seed: u64) -> Result<FilterRun> {
    let start = Instant::now();
    let name = if ioo_only { "dbf-ioo-only" } else { "dbf" };
    let bounce = match env {
        EnvConfig::BouncePatch(c) => Some((c.n_objects, c.period())),
        _ => None,
    };
    let per_traj: Vec<Result<Traj>> = (0..test.count())
        .into_par_iter()
        .map(|i| {
            let obs = test.obs_sequence(i);
            let mut rng = traj_rng(seed, i);
            if ioo_only {
                let means = match bounce {
                    Some((n, p)) => model.ioo_outputs(&obs)?.iter().map(|o| bounce_physical(&o.f, n, p)).collect(),
                    None => model.ioo_only_estimate(&obs),
                };
                return Ok(Traj {
                    means,
                    samples: None,
                    beliefs: None,
                });
            }
            let out = model.filter(&obs)?;
            let (means, samples) = match bounce {
                Some((n, p)) => {
                    let means = out.filtered.iter().map(|b| bounce_physical(b.mean(), n, p)).collect();
                    let samples = if n_samples > 0 {
                        let mut all = Vec::with_capacity(out.filtered.len());
                        for b in &out.filtered {
                            let h = b.sample(n_samples, &mut rng)?;
                            let rows: Vec<DVector<f64>> = (0..n_samples).map(|r| bounce_physical(&h.row(r).transpose(), n, p)).collect();
                            all.push(DMatrix::from_fn(n_samples, rows[0].len(), |r, j| rows[r][j]));
                        }
                        Some(all)
                    } else {
                        None
                    };
                    (means, samples)
                }
                None => {
                    let means = model.decode(&out.filtered.iter().map(|b| b.mean().clone()).collect::<Vec<_>>());
                    let samples = if n_samples > 0 {
                        Some(out.filtered.iter().map(|b| model.emission_sample(b, n_samples, &mut rng)).collect::<dbf_core::Result<Vec<_>>>()?)
                    } else {
                        None
                    };
                    (means, samples)
                }
            };
            Ok(Traj {
                means,
                samples,
                beliefs: Some(out.filtered),
            })
        })
        .collect();
    let mut run = FilterRun {
        filter: name.into(),
        means: Vec::new(),
        samples: (n_samples > 0 && !ioo_only).then(Vec::new),
        beliefs: (!ioo_only).then(Vec::new),
        inference_secs: 0.0,
    };
    for t in per_traj {
        let t = t?;
        run.means.push(t.means);
        if let (Some(all), Some(s)) = (run.samples.as_mut(), t.samples) {
            all.push(s);
        }
        if let (Some(all), Some(b)) = (run.beliefs.as_mut(), t.beliefs) {
            all.push(b);
        }
    }
    run.inference_secs = start.elapsed().as_secs_f64();
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_tag_and_base() {
        assert_ne!(derive_seed(0, TAG_TEST), derive_seed(0, TAG_TRAIN));
        assert_ne!(derive_seed(0, TAG_TEST), derive_seed(1, TAG_TEST));
        assert_eq!(derive_seed(5, TAG_FILTER), derive_seed(5, TAG_FILTER));
    }

    #[test]
    fn bounce_latent_folds_into_the_frame() {
        let p = 7.0;
        let h = DVector::from_vec(vec![8.0, 0.5, 3.0, -0.25]);
        let z = bounce_physical(&h, 1, p);
        assert_eq!(z[0], 6.0);
        assert_eq!(z[1], 3.0);
        assert_eq!(z[2], -0.5);
        assert_eq!(z[3], -0.25);
    }
}
