//! Seeded trajectory generation and the on-disk batch format.
//!
//! A batch is three files sharing a stem: `<stem>.states.f64` and
//! `<stem>.obs.f64` hold little-endian f64 values laid out row-major as
//! `[count × T × dim]`, and `<stem>.json` is the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EnvConfig, StateSpace};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// RNG for one time step of one trajectory. Every (trajectory, step) pair owns
/// a disjoint ChaCha stream segment, so any suffix of a trajectory can be
/// regenerated independently.
pub fn substream(seed: u64, trajectory: usize, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trajectory as u64);
    rng.set_word_pos((step as u128) << 40);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub state: usize,
    pub obs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub format_version: u32,
    pub env: String,
    pub params: EnvConfig,
    pub count: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub dims: Dims,
    pub seed: u64,
    /// Index of the first trajectory in the seed's substream numbering.
    #[serde(default)]
    pub first_index: usize,
    /// Initial-condition distribution, recorded because the defaults are choices.
    pub init_distribution: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub manifest: BatchManifest,
    pub states: Vec<f64>,
    pub observations: Vec<f64>,
}

fn init_description(env: &EnvConfig) -> String {
    match env {
        EnvConfig::Pendulum(c) => format!(
            "theta uniform in (-pi, pi], omega uniform in [-{0}, {0}]",
            c.omega_range
        ),
        EnvConfig::Lorenz96(c) => format!(
            "F + N(0, 1) per grid point, then {} burn-in steps",
            c.burn_in
        ),
        EnvConfig::BouncePatch(c) => format!(
            "positions uniform in [0, {}], velocities uniform in [-{1}, {1}]",
            c.period(),
            c.max_speed
        ),
        EnvConfig::Lgssm(_) => "N(init_mean, init_cov)".into(),
    }
}

fn one_trajectory(
    space: &dyn StateSpace,
    steps: usize,
    seed: u64,
    index: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut states = Vec::with_capacity(steps * space.state_dim());
    let mut obs = Vec::with_capacity(steps * space.obs_dim());
    let mut rng = substream(seed, index, 0);
    let mut z = space.canonicalize(space.sample_initial(&mut rng)?);
    for t in 0..steps {
        if t > 0 {
            rng = substream(seed, index, t);
            z = space.advance(&z, &mut rng)?;
        }
        let o = space.observe(&z, &mut rng)?;
        states.extend(z.iter());
        obs.extend(o.iter());
    }
    Ok((states, obs))
}

/// Trajectories `first..first + count` of the seed's numbering.
pub fn generate_range(
    env: &EnvConfig,
    steps: usize,
    first: usize,
    count: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    if steps == 0 || count == 0 {
        return Err(Error::InvalidArgument("T and count must be ≥ 1".into()));
    }
    env.validate()?;
    let space = env.space();
    let parts = (first..first + count)
        .into_par_iter()
        .map(|i| one_trajectory(space, steps, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let mut states = Vec::with_capacity(count * steps * space.state_dim());
    let mut observations = Vec::with_capacity(count * steps * space.obs_dim());
    for (s, o) in parts {
        states.extend(s);
        observations.extend(o);
    }
    Ok(TrajectoryBatch {
        manifest: BatchManifest {
            format_version: FORMAT_VERSION,
            env: env.name().into(),
            params: env.clone(),
            count,
            steps,
            dims: Dims {
                state: space.state_dim(),
                obs: space.obs_dim(),
            },
            seed,
            first_index: first,
            init_distribution: init_description(env),
        },
        states,
        observations,
    })
}

pub fn generate(env: &EnvConfig, steps: usize, count: usize, seed: u64) -> Result<TrajectoryBatch> {
    generate_range(env, steps, 0, count, seed)
}

/// Continues trajectory `index` from its state at step `t`, producing the
/// states and observations of steps `t+1..steps`.
pub fn generate_tail(
    env: &EnvConfig,
    state_at_t: &[f64],
    t: usize,
    steps: usize,
    seed: u64,
    index: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let space = env.space();
    let mut z = DVector::from_column_slice(state_at_t);
    let mut states = Vec::new();
    let mut obs = Vec::new();
    for s in (t + 1)..steps {
        let mut rng = substream(seed, index, s);
        z = space.advance(&z, &mut rng)?;
        let o = space.observe(&z, &mut rng)?;
        states.extend(z.iter());
        obs.extend(o.iter());
    }
    Ok((states, obs))
}

fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} is not a whole number of f64 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn write_f64_file(path: &Path, values: &[f64]) -> Result<()> {
    write_f64s(path, values)
}

impl TrajectoryBatch {
    pub fn count(&self) -> usize {
        self.manifest.count
    }

    pub fn steps(&self) -> usize {
        self.manifest.steps
    }

    pub fn state_dim(&self) -> usize {
        self.manifest.dims.state
    }

    pub fn obs_dim(&self) -> usize {
        self.manifest.dims.obs
    }

    pub fn state(&self, i: usize, t: usize) -> &[f64] {
        let d = self.state_dim();
        let start = (i * self.steps() + t) * d;
        &self.states[start..start + d]
    }

    pub fn obs(&self, i: usize, t: usize) -> &[f64] {
        let d = self.obs_dim();
        let start = (i * self.steps() + t) * d;
        &self.observations[start..start + d]
    }

    pub fn obs_sequence(&self, i: usize) -> Vec<DVector<f64>> {
        (0..self.steps())
            .map(|t| DVector::from_column_slice(self.obs(i, t)))
            .collect()
    }

    pub fn state_sequence(&self, i: usize) -> Vec<DVector<f64>> {
        (0..self.steps())
            .map(|t| DVector::from_column_slice(self.state(i, t)))
            .collect()
    }

    fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
        (
            dir.join(format!("{stem}.states.f64")),
            dir.join(format!("{stem}.obs.f64")),
            dir.join(format!("{stem}.json")),
        )
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (sp, op, mp) = Self::paths(dir, stem);
        write_f64s(&sp, &self.states)?;
        write_f64s(&op, &self.observations)?;
        fs::write(mp, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let (sp, op, mp) = Self::paths(dir, stem);
        let manifest: BatchManifest = serde_json::from_str(&fs::read_to_string(mp)?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported batch format version {}",
                manifest.format_version
            )));
        }
        let states = read_f64s(&sp)?;
        let observations = read_f64s(&op)?;
        let n = manifest.count * manifest.steps;
        if states.len() != n * manifest.dims.state {
            return Err(Error::dims("state values", n * manifest.dims.state, states.len()));
        }
        if observations.len() != n * manifest.dims.obs {
            return Err(Error::dims("observation values", n * manifest.dims.obs, observations.len()));
        }
        Ok(TrajectoryBatch {
            manifest,
            states,
            observations,
        })
    }

    /// Rebuilds the batch from its manifest alone.
    pub fn regenerate(manifest: &BatchManifest) -> Result<Self> {
        generate_range(
            &manifest.params,
            manifest.steps,
            manifest.first_index,
            manifest.count,
            manifest.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{BouncePatchConfig, LgssmConfig, Lorenz96Config, ObsKind, PendulumConfig};

    fn pendulum() -> EnvConfig {
        EnvConfig::Pendulum(PendulumConfig::default())
    }

    #[test]
    fn single_step_batch() {
        let b = generate(&pendulum(), 1, 1, 3).unwrap();
        assert_eq!(b.states.len(), 4);
        assert_eq!(b.observations.len(), 4);
        let z = b.state(0, 0);
        assert!(z[0] > -std::f64::consts::PI && z[0] <= std::f64::consts::PI);
        assert!(z[2].abs() <= 1.0 && z[3].abs() <= 1.0);
    }

    #[test]
    fn deterministic_and_range_consistent() {
        let env = pendulum();
        let a = generate(&env, 10, 6, 42).unwrap();
        let b = generate(&env, 10, 6, 42).unwrap();
        assert_eq!(a, b);
        let tail = generate_range(&env, 10, 2, 4, 42).unwrap();
        assert_eq!(&a.states[2 * 10 * 4..], &tail.states[..]);
        let c = generate(&env, 10, 6, 43).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn markov_tail_regeneration() {
        for env in [
            pendulum(),
            EnvConfig::Lorenz96(Lorenz96Config { n_grid: 8, burn_in: 10, ..Default::default() }),
            EnvConfig::Lgssm(LgssmConfig::scalar(0.9, 0.1, 1.0, 1.0)),
        ] {
            let b = generate(&env, 12, 3, 5).unwrap();
            let (t, i) = (4, 1);
            let (states, obs) = generate_tail(&env, b.state(i, t), t, 12, 5, i).unwrap();
            let ds = b.state_dim();
            let dob = b.obs_dim();
            for (k, s) in (t + 1..12).enumerate() {
                assert_eq!(&states[k * ds..(k + 1) * ds], b.state(i, s));
                assert_eq!(&obs[k * dob..(k + 1) * dob], b.obs(i, s));
            }
        }
    }

    #[test]
    fn lorenz96_fixed_point_stays() {
        let cfg = Lorenz96Config { n_grid: 6, burn_in: 0, sigma: 0.0, ..Default::default() };
        let space: &dyn StateSpace = &cfg;
        let mut z = DVector::from_element(6, 8.0);
        let mut rng = substream(0, 0, 0);
        for _ in 0..50 {
            z = space.advance(&z, &mut rng).unwrap();
        }
        assert_eq!(z, DVector::from_element(6, 8.0));
    }

    #[test]
    fn lorenz96_long_run_spread() {
        let env = EnvConfig::Lorenz96(Lorenz96Config {
            obs_kind: ObsKind::Direct,
            ..Default::default()
        });
        let b = generate(&env, 80, 20, 9).unwrap();
        let n = 40;
        for j in 0..n {
            let vals: Vec<f64> = (0..20)
                .flat_map(|i| (0..80).map(move |t| (i, t)))
                .map(|(i, t)| b.state(i, t)[j])
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((2.5..=4.5).contains(&sd), "grid {j}: std {sd}");
        }
    }

    #[test]
    fn file_round_trip_and_regeneration() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = substream(1, 0, 0);
        let env = EnvConfig::BouncePatch(BouncePatchConfig::desk(&mut rng));
        let b = generate(&env, 5, 3, 11).unwrap();
        b.write(dir.path(), "train").unwrap();
        let back = TrajectoryBatch::read(dir.path(), "train").unwrap();
        assert_eq!(back, b);
        assert_eq!(TrajectoryBatch::regenerate(&back.manifest).unwrap(), b);
        let raw = fs::read(dir.path().join("train.states.f64")).unwrap();
        assert_eq!(raw.len(), 3 * 5 * 4 * 8);
        assert_eq!(&raw[..8], &b.states[0].to_le_bytes());
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("train.json")).unwrap()).unwrap();
        for key in ["env", "params", "count", "T", "dims", "seed", "format_version"] {
            assert!(manifest.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn rejects_empty_requests() {
        assert!(generate(&pendulum(), 0, 1, 0).is_err());
        assert!(generate(&pendulum(), 1, 0, 0).is_err());
    }
}
