//! Experiment configuration: a schema-versioned JSON document naming the
//! environment, the filter, the optional training run and the metrics.

use std::path::{Path, PathBuf};

use dbf_base::envs::{EnvConfig, Lorenz96Config, ObsKind, PendulumConfig, StateSpace};
use dbf_core::{DbfConfig, DynamicsSpec};
use dbf_nn::{LinearBlockSpec, NetworkSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::metrics::Bins;

pub const SCHEMA_VERSION: u32 = 1;

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    pub env: EnvConfig,
    /// Length T of the test trajectories.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub test: TestSpec,
    pub filter: FilterSpec,
    /// Further filters run on the same test set by `compare`.
    #[serde(default)]
    pub compare: Vec<FilterSpec>,
    #[serde(default)]
    pub training: Option<TrainingSpec>,
    /// Empty means the environment's default metric set.
    #[serde(default)]
    pub metrics: Vec<MetricSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_steps() -> usize {
    80
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpec {
    #[serde(default = "default_test_count")]
    pub count: usize,
    /// Existing trajectory batch `<dir>/<stem>` to use instead of generating.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Window of the final-step metrics.
    #[serde(default = "default_final_k")]
    pub final_k: usize,
}

fn default_test_count() -> usize {
    10
}

fn default_final_k() -> usize {
    10
}

impl Default for TestSpec {
    fn default() -> Self {
        TestSpec {
            count: default_test_count(),
            data: None,
            final_k: default_final_k(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    #[serde(default = "default_n_ens")]
    pub n_ens: usize,
    #[serde(default = "one")]
    pub inflation: f64,
    /// Std of Gaussian jitter added to every member after each forecast.
    #[serde(default)]
    pub process_noise: f64,
}

fn default_n_ens() -> usize {
    1000
}

fn one() -> f64 {
    1.0
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            n_ens: default_n_ens(),
            inflation: 1.0,
            process_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSpec {
    #[serde(default = "default_n_particles")]
    pub n_particles: usize,
    /// Resample when ESS < threshold · n_p.
    #[serde(default = "default_resample_threshold")]
    pub resample_threshold: f64,
    #[serde(default)]
    pub process_noise: f64,
}

fn default_n_particles() -> usize {
    10_000
}

fn default_resample_threshold() -> f64 {
    0.5
}

impl Default for ParticleSpec {
    fn default() -> Self {
        ParticleSpec {
            n_particles: default_n_particles(),
            resample_threshold: default_resample_threshold(),
            process_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbfSpec {
    pub latent_dim: usize,
    /// Width of linear-block networks.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Channels and block count of convolutional networks.
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_conv_blocks")]
    pub conv_blocks: usize,
    /// Overrides the environment's default transition log-variance.
    #[serde(default)]
    pub log_q: Option<f64>,
    /// Trained model `<dir>/<stem>`; when absent the model is trained.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_hidden() -> usize {
    100
}

fn default_blocks() -> usize {
    10
}

fn default_channels() -> usize {
    20
}

fn default_conv_blocks() -> usize {
    9
}

impl DbfSpec {
    pub fn new(latent_dim: usize) -> Self {
        DbfSpec {
            latent_dim,
            hidden: default_hidden(),
            blocks: default_blocks(),
            channels: default_channels(),
            conv_blocks: default_conv_blocks(),
            log_q: None,
            checkpoint: None,
        }
    }

    /// Model configuration for `env`. Bouncing patches use fixed
    /// constant-velocity dynamics and are assembled by the runner.
    pub fn model_config(&self, env: &EnvConfig) -> Result<DbfConfig> {
        let mut cfg = match env {
            EnvConfig::Pendulum(_) => DbfConfig::pendulum(self.latent_dim, self.hidden, self.blocks),
            EnvConfig::Lorenz96(c) => DbfConfig::lorenz96(c.n_grid, self.latent_dim, self.channels, self.conv_blocks),
            EnvConfig::Lgssm(c) => {
                let (dz, dobs) = (c.state_dim(), c.obs_dim());
                let mut cfg = DbfConfig::pendulum(self.latent_dim, self.hidden, self.blocks);
                cfg.obs_dim = dobs;
                cfg.encoder = NetworkSpec::LinearBlock(LinearBlockSpec {
                    input: dobs,
                    hidden: self.hidden,
                    output: self.latent_dim,
                    blocks: self.blocks,
                });
                let e = cfg.emission.as_mut().expect("pendulum preset has an emission");
                e.decoder = NetworkSpec::LinearBlock(LinearBlockSpec {
                    input: self.latent_dim,
                    hidden: self.hidden,
                    output: dz,
                    blocks: self.blocks,
                });
                e.families = vec![dbf_core::EmissionFamily::Gaussian; dz];
                cfg
            }
            EnvConfig::BouncePatch(c) => {
                let d = c.state_dim();
                if self.latent_dim != d {
                    return Err(config_err(format!(
                        "bouncing patches need latent_dim = 4 · objects = {d}, got {}",
                        self.latent_dim
                    )));
                }
                let q = c.log_q.exp();
                DbfConfig {
                    latent_dim: d,
                    obs_dim: c.obs_dim(),
                    encoder: NetworkSpec::LinearBlock(LinearBlockSpec {
                        input: c.obs_dim(),
                        hidden: self.hidden,
                        output: d,
                        blocks: self.blocks,
                    }),
                    dynamics: DynamicsSpec::Fixed {
                        pairs: vec![
                            dbf_base::gauss::PairMap {
                                a11: 1.0,
                                a12: c.dt,
                                a21: 0.0,
                                a22: 1.0
                            };
                            d / 2
                        ],
                        noise: vec![q; d],
                    },
                    emission: None,
                    vprior_variance: 1e8,
                    init_variance: 100.0,
                    samples: 1,
                }
            }
        };
        if let (Some(lq), DynamicsSpec::Learned { log_q }) = (self.log_q, &mut cfg.dynamics) {
            *log_q = lq;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FilterSpec {
    Kf,
    Enkf(EnsembleSpec),
    Etkf(EnsembleSpec),
    Pf(ParticleSpec),
    Dbf(DbfSpec),
}

impl FilterSpec {
    pub fn name(&self) -> &'static str {
        match self {
            FilterSpec::Kf => "kf",
            FilterSpec::Enkf(_) => "enkf",
            FilterSpec::Etkf(_) => "etkf",
            FilterSpec::Pf(_) => "pf",
            FilterSpec::Dbf(_) => "dbf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub lr: f64,
    pub batch: usize,
    /// Training trajectories per epoch, regenerated on demand from the seed.
    pub train_count: usize,
    #[serde(default = "one_usize")]
    pub epochs: usize,
    /// Length of training trajectories (defaults to the test length).
    #[serde(default)]
    pub train_steps: Option<usize>,
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// One model is trained per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    #[serde(default)]
    pub freeze_g_epochs: usize,
    /// After this many epochs the learning rate drops to `lr · lr_decay`.
    #[serde(default)]
    pub decay_after: Option<usize>,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub time_limit_secs: Option<f64>,
    /// Moving-average window of the per-step loss curve.
    #[serde(default = "default_ma_window")]
    pub ma_window: usize,
}

fn one_usize() -> usize {
    1
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_chunk() -> usize {
    8
}

fn default_lr_decay() -> f64 {
    0.1
}

fn default_ma_window() -> usize {
    50
}

impl TrainingSpec {
    pub fn new(lr: f64, batch: usize, train_count: usize, epochs: usize) -> Self {
        TrainingSpec {
            lr,
            batch,
            train_count,
            epochs,
            train_steps: None,
            max_steps: None,
            seeds: default_seeds(),
            chunk: default_chunk(),
            freeze_g_epochs: 0,
            decay_after: None,
            lr_decay: default_lr_decay(),
            time_limit_secs: None,
            ma_window: default_ma_window(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MetricSpec {
    /// RMSE over the final `k` steps (the test spec's window by default).
    Rmse {
        label: String,
        dims: Vec<usize>,
        #[serde(default)]
        k: Option<usize>,
    },
    /// Jeffreys divergence of pooled normalised errors from N(0, 1).
    Jeffreys {
        label: String,
        dims: Vec<usize>,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default)]
        bins: Bins,
    },
    /// Fraction of test trajectories whose final-window RMSE is below
    /// `threshold` in every group of dimensions.
    SuccessRate {
        label: String,
        groups: Vec<Vec<usize>>,
        threshold: f64,
    },
}

fn default_samples() -> usize {
    100
}

impl MetricSpec {
    pub fn label(&self) -> &str {
        match self {
            MetricSpec::Rmse { label, .. } | MetricSpec::Jeffreys { label, .. } | MetricSpec::SuccessRate { label, .. } => label,
        }
    }

    fn dims(&self) -> Vec<usize> {
        match self {
            MetricSpec::Rmse { dims, .. } | MetricSpec::Jeffreys { dims, .. } => dims.clone(),
            MetricSpec::SuccessRate { groups, .. } => groups.iter().flatten().copied().collect(),
        }
    }
}

/// Success threshold for bouncing patches, in frame pixels. The patch frame
/// is far smaller than a 44-pixel movie, so the unit is the same (one pixel)
/// but the relative tolerance is looser.
pub const BOUNCE_SUCCESS_THRESHOLD: f64 = 1.0;

/// The metric set reported when a config lists none.
pub fn default_metrics(env: &EnvConfig) -> Vec<MetricSpec> {
    let rmse = |label: &str, dims: Vec<usize>| MetricSpec::Rmse {
        label: label.into(),
        dims,
        k: None,
    };
    match env {
        EnvConfig::Pendulum(_) => vec![
            rmse("rmse_theta", vec![0, 1]),
            rmse("rmse_omega", vec![2, 3]),
            MetricSpec::Jeffreys {
                label: "jeffreys_omega".into(),
                dims: vec![2, 3],
                samples: default_samples(),
                bins: Bins::default(),
            },
        ],
        EnvConfig::Lorenz96(c) => vec![rmse("rmse", (0..c.n_grid).collect())],
        EnvConfig::Lgssm(c) => vec![rmse("rmse", (0..c.state_dim()).collect())],
        EnvConfig::BouncePatch(c) => {
            let h = 2 * c.n_objects;
            vec![
                rmse("rmse_position", (0..h).collect()),
                rmse("rmse_velocity", (h..2 * h).collect()),
                MetricSpec::SuccessRate {
                    label: "success_rate".into(),
                    groups: vec![(0..h).collect(), (h..2 * h).collect()],
                    threshold: BOUNCE_SUCCESS_THRESHOLD,
                },
            ]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Latent dimensions to try with the configured DBF filter.
    pub latent_dims: Vec<usize>,
}

impl ExperimentConfig {
    pub fn new(name: impl Into<String>, env: EnvConfig, filter: FilterSpec) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            name: name.into(),
            env,
            steps: default_steps(),
            seed: 0,
            test: TestSpec::default(),
            filter,
            compare: Vec::new(),
            training: None,
            metrics: Vec::new(),
            sweep: None,
            output_dir: default_output_dir(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical (compact) JSON form, hex encoded. The output
    /// directory is left out: where results go does not change them.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let canon = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(canon.as_bytes()))
    }

    pub fn metric_specs(&self) -> Vec<MetricSpec> {
        if self.metrics.is_empty() {
            default_metrics(&self.env)
        } else {
            self.metrics.clone()
        }
    }

    /// All filters this config names, primary first.
    pub fn filters(&self) -> Vec<&FilterSpec> {
        std::iter::once(&self.filter).chain(&self.compare).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.env.validate().map_err(|e| config_err(e.to_string()))?;
        if self.steps == 0 || self.test.count == 0 {
            return Err(config_err("steps and test.count must be ≥ 1"));
        }
        if self.test.final_k == 0 || self.test.final_k > self.steps {
            return Err(config_err(format!("final_k must be in 1..={}", self.steps)));
        }
        if let Some(p) = &self.test.data {
            check_stem(p, "json")?;
        }
        let width = self.env.space().state_dim();
        for m in self.metric_specs() {
            if m.dims().iter().any(|&d| d >= width) || m.dims().is_empty() {
                return Err(config_err(format!("metric {} selects dimensions outside 0..{width}", m.label())));
            }
            if let MetricSpec::Rmse { k: Some(k), .. } = m {
                if k == 0 || k > self.steps {
                    return Err(config_err(format!("metric {} has k = {k} outside 1..={}", m.label(), self.steps)));
                }
            }
        }
        for f in self.filters() {
            self.validate_filter(f)?;
        }
        if let Some(t) = &self.training {
            if !(t.lr > 0.0) || t.batch == 0 || t.train_count == 0 || t.seeds.is_empty() || t.chunk == 0 {
                return Err(config_err("training needs lr > 0, batch ≥ 1, train_count ≥ 1, chunk ≥ 1 and at least one seed"));
            }
        }
        if let Some(s) = &self.sweep {
            if s.latent_dims.is_empty() {
                return Err(config_err("sweep grid is empty"));
            }
            if !matches!(self.filter, FilterSpec::Dbf(_)) {
                return Err(config_err("latent-dimension sweeps need a dbf filter"));
            }
            for &d in &s.latent_dims {
                if d == 0 || d % 2 != 0 {
                    return Err(config_err(format!("latent dimension {d} must be even and > 0")));
                }
            }
        }
        Ok(())
    }

    fn validate_filter(&self, f: &FilterSpec) -> Result<()> {
        match f {
            FilterSpec::Kf => {
                if !matches!(self.env, EnvConfig::Lgssm(_)) {
                    return Err(config_err("the Kalman filter needs a linear-Gaussian environment"));
                }
            }
            FilterSpec::Enkf(e) | FilterSpec::Etkf(e) => {
                if e.n_ens < 2 || !(e.inflation > 0.0) || !(e.process_noise >= 0.0) {
                    return Err(config_err("ensembles need n_ens ≥ 2, inflation > 0, process_noise ≥ 0"));
                }
            }
            FilterSpec::Pf(p) => {
                if p.n_particles == 0 || !(0.0..=1.0).contains(&p.resample_threshold) || !(p.process_noise >= 0.0) {
                    return Err(config_err("particle filters need n_particles ≥ 1, threshold in [0, 1], process_noise ≥ 0"));
                }
            }
            FilterSpec::Dbf(d) => {
                if d.latent_dim == 0 || d.latent_dim % 2 != 0 {
                    return Err(config_err(format!("d_h must be even and > 0, got {}", d.latent_dim)));
                }
                match &d.checkpoint {
                    Some(p) => check_stem(p, "json")?,
                    None => {
                        if self.training.is_none() {
                            return Err(config_err("dbf without a checkpoint needs a training section"));
                        }
                    }
                }
                d.model_config(&self.env)?;
            }
        }
        Ok(())
    }
}

/// Checks that `<dir>/<stem>.<ext>` exists.
fn check_stem(p: &Path, ext: &str) -> Result<()> {
    let file = p.with_extension(ext);
    if !file.exists() {
        return Err(config_err(format!("referenced file {} does not exist", file.display())));
    }
    Ok(())
}

/// Splits `<dir>/<stem>` into its parts.
pub fn split_stem(p: &Path) -> Result<(PathBuf, String)> {
    let stem = p
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| config_err(format!("{} does not name a file stem", p.display())))?;
    let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, stem.to_string()))
}

/// Named configurations. `*-desk` profiles are sized for a single CPU;
/// `*-paper` profiles carry the full-scale training hyperparameters.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let pend = |sigma: f64| {
        EnvConfig::Pendulum(PendulumConfig {
            sigma,
            ..PendulumConfig::default()
        })
    };
    let l96 = |n_grid: usize, obs_kind: ObsKind| {
        EnvConfig::Lorenz96(Lorenz96Config {
            n_grid,
            obs_kind,
            ..Lorenz96Config::default()
        })
    };
    let cfg = match name {
        "pendulum-enkf" => ExperimentConfig::new(
            name,
            pend(0.1),
            FilterSpec::Enkf(EnsembleSpec {
                process_noise: BASELINE_JITTER,
                ..EnsembleSpec::default()
            }),
        ),
        "lorenz96-pf" => ExperimentConfig::new(name, l96(40, ObsKind::Direct), FilterSpec::Pf(baseline_pf())),
        "lorenz96-enkf" => ExperimentConfig::new(
            name,
            l96(40, ObsKind::Direct),
            FilterSpec::Enkf(EnsembleSpec {
                process_noise: BASELINE_JITTER,
                ..EnsembleSpec::default()
            }),
        ),
        "pendulum-desk" => {
            let mut c = ExperimentConfig::new(name, pend(0.1), FilterSpec::Dbf(desk_pendulum_dbf()));
            c.training = Some(desk_pendulum_training());
            c
        }
        "pendulum-paper" => {
            let mut c = ExperimentConfig::new(name, pend(0.1), FilterSpec::Dbf(DbfSpec::new(50)));
            c.training = Some(TrainingSpec::new(1e-3, 256, 10_240_000, 1));
            c
        }
        "lorenz96-desk" => {
            let mut c = ExperimentConfig::new(name, l96(10, ObsKind::QuarticSaturating), FilterSpec::Dbf(desk_lorenz_dbf()));
            c.training = Some(desk_lorenz_training());
            c.compare = vec![FilterSpec::Pf(baseline_pf())];
            c
        }
        "lorenz96-paper" => {
            let mut c = ExperimentConfig::new(name, l96(40, ObsKind::QuarticSaturating), FilterSpec::Dbf(DbfSpec::new(800)));
            c.training = Some(TrainingSpec::new(3e-3, 64, 25_600_000, 1));
            c
        }
        _ => {
            return Err(config_err(format!(
                "unknown preset `{name}` (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(cfg)
}

/// Additive jitter std used by every classical baseline preset. Without it a
/// perfect-model ensemble is sharper than the published baselines and the
/// bootstrap PF collapses onto a single particle.
pub const BASELINE_JITTER: f64 = 0.1;

pub const PRESETS: &[&str] = &[
    "pendulum-enkf",
    "pendulum-desk",
    "pendulum-paper",
    "lorenz96-pf",
    "lorenz96-enkf",
    "lorenz96-desk",
    "lorenz96-paper",
];

fn baseline_pf() -> ParticleSpec {
    ParticleSpec {
        process_noise: BASELINE_JITTER,
        ..ParticleSpec::default()
    }
}

pub fn desk_pendulum_dbf() -> DbfSpec {
    DbfSpec {
        hidden: 64,
        blocks: 4,
        ..DbfSpec::new(20)
    }
}

/// Full-length sequences, six epochs at 3e-3 then two at 3e-4.
pub fn desk_pendulum_training() -> TrainingSpec {
    TrainingSpec {
        decay_after: Some(6),
        lr_decay: 0.1,
        ..TrainingSpec::new(3e-3, 64, 50_000, 8)
    }
}

pub fn desk_lorenz_dbf() -> DbfSpec {
    DbfSpec {
        channels: 8,
        conv_blocks: 3,
        ..DbfSpec::new(80)
    }
}

pub fn desk_lorenz_training() -> TrainingSpec {
    TrainingSpec::new(3e-3, 64, 100_000, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            c.validate().unwrap();
            let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn odd_latent_dimension_is_rejected() {
        let mut c = preset("pendulum-desk").unwrap();
        if let FilterSpec::Dbf(d) = &mut c.filter {
            d.latent_dim = 7;
        }
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn wrong_schema_and_missing_files_are_config_errors() {
        let mut c = preset("pendulum-enkf").unwrap();
        c.schema_version = 99;
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
        let mut c = preset("pendulum-enkf").unwrap();
        c.test.data = Some(PathBuf::from("/nonexistent/dir/test"));
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&preset("pendulum-enkf").unwrap().to_json()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn kf_needs_a_linear_environment() {
        let mut c = preset("pendulum-enkf").unwrap();
        c.filter = FilterSpec::Kf;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = preset("pendulum-enkf").unwrap();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), c.hash());
    }
}
