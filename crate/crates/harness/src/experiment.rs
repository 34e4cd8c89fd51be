//! Experiment pipeline: test data → (training) → filtering → metrics →
//! report and plot data. Also the latent-dimension sweep.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dbf_base::envs::{generate, EnvConfig, TrajectoryBatch};
use dbf_base::io::BeliefFile;
use dbf_core::{train_joint, train_linear, BouncePatchObs, DbfModel, GeneratedSource, TrainOptions, TrainReport};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{split_stem, DbfSpec, ExperimentConfig, FilterSpec, MetricSpec, TrainingSpec};
use crate::error::{HarnessError, Result};
use crate::metrics::{jeffreys_vs_unit_gaussian, normalized_errors, rmse_final_k, rmse_per_step};
use crate::report::{CsvMatrix, MetricReport, MetricRow, Timings, TrainSummary};
use crate::runner::{derive_seed, run_classic, run_dbf, truth_sequences, FilterRun, TAG_FILTER, TAG_INIT, TAG_TEST, TAG_TRAIN};

/// A DBF model together with how it was obtained.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model_seed: u64,
    pub model: DbfModel,
    /// `None` for a model loaded from a checkpoint.
    pub report: Option<TrainReport>,
    pub train_secs: f64,
}

impl TrainedModel {
    pub fn aborted(&self) -> Option<&str> {
        self.report.as_ref().and_then(|r| r.aborted.as_deref())
    }
}

/// Noise level of the environment's observations.
pub fn env_sigma(env: &EnvConfig) -> Option<f64> {
    match env {
        EnvConfig::Pendulum(c) => Some(c.sigma),
        EnvConfig::Lorenz96(c) => Some(c.sigma),
        EnvConfig::BouncePatch(c) => Some(c.sigma),
        EnvConfig::Lgssm(_) => None,
    }
}

/// The test trajectories: loaded from `test.data` or generated from the seed.
pub fn test_batch(cfg: &ExperimentConfig) -> Result<TrajectoryBatch> {
    match &cfg.test.data {
        Some(p) => {
            let (dir, stem) = split_stem(p)?;
            let b = TrajectoryBatch::read(&dir, &stem)?;
            if b.manifest.params != cfg.env {
                return Err(HarnessError::Config(format!("{} was generated for a different environment", p.display())));
            }
            if b.steps() < cfg.test.final_k {
                return Err(HarnessError::Config(format!("{} has T = {} < final_k", p.display(), b.steps())));
            }
            Ok(b)
        }
        None => Ok(generate(&cfg.env, cfg.steps, cfg.test.count, derive_seed(cfg.seed, TAG_TEST))?),
    }
}

/// Training data of one model seed, regenerated on demand.
pub fn training_source(cfg: &ExperimentConfig, training: &TrainingSpec, model_seed: u64) -> GeneratedSource {
    GeneratedSource {
        env: cfg.env.clone(),
        steps: training.train_steps.unwrap_or(cfg.steps),
        count: training.train_count,
        seed: derive_seed(derive_seed(cfg.seed, TAG_TRAIN), model_seed),
    }
}

fn train_options(training: &TrainingSpec, lr: f64, epochs: usize, seed: u64, dir: Option<&Path>) -> TrainOptions {
    let mut o = TrainOptions::new(lr, training.batch, epochs, seed);
    o.max_steps = training.max_steps;
    o.chunk = training.chunk;
    o.freeze_g_epochs = training.freeze_g_epochs;
    o.time_limit_secs = training.time_limit_secs;
    o.checkpoint_dir = dir.map(Path::to_path_buf);
    o
}

fn merge_reports(a: TrainReport, b: TrainReport) -> TrainReport {
    let mut out = a;
    out.losses.extend(b.losses);
    out.expected_loglik.extend(b.expected_loglik);
    out.kl.extend(b.kl);
    out.steps += b.steps;
    out.epochs_completed += b.epochs_completed;
    out.aborted = b.aborted;
    out.hit_time_limit = b.hit_time_limit;
    out.wall_secs += b.wall_secs;
    out
}

/// Trains one model. `dir` receives the checkpoints.
pub fn train_dbf(cfg: &ExperimentConfig, spec: &DbfSpec, training: &TrainingSpec, model_seed: u64, dir: Option<&Path>) -> Result<TrainedModel> {
    let start = Instant::now();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, TAG_INIT), model_seed));
    let mut model = DbfModel::new(spec.model_config(&cfg.env)?, &mut init_rng)?;
    let data = training_source(cfg, training, model_seed);
    let bounce = match &cfg.env {
        EnvConfig::BouncePatch(c) => {
            let init = (0..c.n_objects).map(|_| (0..c.patch * c.patch).map(|_| init_rng.gen_range(0.0..1.0)).collect()).collect();
            Some(BouncePatchObs::new(&mut model.params, c.frame, c.patch, c.n_objects, c.sigma, init)?)
        }
        _ => None,
    };
    let noise_seed = derive_seed(data.seed, 1);
    // optional two-stage schedule: lr for `decay_after` epochs, then lr · lr_decay
    let stages: Vec<(f64, usize, u64)> = match training.decay_after {
        Some(k) if k < training.epochs => vec![
            (training.lr, k, noise_seed),
            (training.lr * training.lr_decay, training.epochs - k, noise_seed.wrapping_add(1)),
        ],
        _ => vec![(training.lr, training.epochs, noise_seed)],
    };
    let mut report: Option<TrainReport> = None;
    for (lr, epochs, seed) in stages {
        let mut opts = train_options(training, lr, epochs, seed, dir);
        if let Some(prev) = &report {
            if prev.aborted.is_some() || prev.hit_time_limit {
                break;
            }
            opts.freeze_g_epochs = opts.freeze_g_epochs.saturating_sub(prev.epochs_completed);
            opts.max_steps = opts.max_steps.map(|m| m.saturating_sub(prev.steps));
            opts.time_limit_secs = opts.time_limit_secs.map(|t| (t - prev.wall_secs).max(0.0));
        }
        let r = match &bounce {
            Some(obs) => train_linear(&mut model, obs, &data, false, &opts)?,
            None => train_joint(&mut model, &data, &opts)?,
        };
        report = Some(match report {
            Some(prev) => merge_reports(prev, r),
            None => r,
        });
    }
    if let Some(d) = dir {
        model.save(d, "model", serde_json::json!({ "model_seed": model_seed, "config_hash": cfg.hash() }))?;
    }
    Ok(TrainedModel {
        model_seed,
        model,
        report,
        train_secs: start.elapsed().as_secs_f64(),
    })
}

/// Loads the configured checkpoint or trains one model per seed.
pub fn obtain_models(cfg: &ExperimentConfig, spec: &DbfSpec, out: Option<&Path>) -> Result<Vec<TrainedModel>> {
    if let Some(p) = &spec.checkpoint {
        let (dir, stem) = split_stem(p)?;
        let (model, extra) = DbfModel::load(&dir, &stem)?;
        let model_seed = extra.get("model_seed").and_then(|v| v.as_u64()).unwrap_or(0);
        return Ok(vec![TrainedModel {
            model_seed,
            model,
            report: None,
            train_secs: 0.0,
        }]);
    }
    let training = cfg.training.as_ref().ok_or_else(|| HarnessError::Config("dbf needs a training section or a checkpoint".into()))?;
    training
        .seeds
        .iter()
        .map(|&s| {
            let dir = out.map(|o| o.join(format!("model_seed{s}")));
            train_dbf(cfg, spec, training, s, dir.as_deref())
        })
        .collect()
}

pub fn train_summary(m: &TrainedModel, window: usize) -> TrainSummary {
    let eig = m.model.dynamics().map(|d| d.eig_magnitudes().into_iter().fold(0.0, f64::max));
    match &m.report {
        Some(r) => {
            let ma = r.moving_average(window.max(1));
            TrainSummary {
                model_seed: m.model_seed,
                steps: r.steps,
                epochs_completed: r.epochs_completed,
                aborted: r.aborted.clone(),
                hit_time_limit: r.hit_time_limit,
                loss_ma_first: ma.first().copied().unwrap_or(f64::NAN),
                loss_ma_last: ma.last().copied().unwrap_or(f64::NAN),
                max_abs_eigenvalue: eig,
            }
        }
        None => TrainSummary {
            model_seed: m.model_seed,
            steps: 0,
            epochs_completed: 0,
            aborted: None,
            hit_time_limit: false,
            loss_ma_first: f64::NAN,
            loss_ma_last: f64::NAN,
            max_abs_eigenvalue: eig,
        },
    }
}

fn samples_needed(metrics: &[MetricSpec]) -> usize {
    metrics
        .iter()
        .map(|m| match m {
            MetricSpec::Jeffreys { samples, .. } => *samples,
            _ => 0,
        })
        .max()
        .unwrap_or(0)
}

/// Metric rows of one filter run. Calibration cells with zero spread are
/// skipped and counted in `notes`.
pub fn evaluate_run(
    cfg: &ExperimentConfig,
    test: &TrajectoryBatch,
    run: &FilterRun,
    model_seed: Option<u64>,
    notes: &mut BTreeMap<String, String>,
) -> Result<Vec<MetricRow>> {
    let truth = truth_sequences(test);
    let angles = cfg.env.space().angle_dims();
    let sigma = env_sigma(&cfg.env);
    let tag = match model_seed {
        Some(s) => format!("{}[seed {s}]", run.filter),
        None => run.filter.clone(),
    };
    let mut rows = Vec::new();
    for m in cfg.metric_specs() {
        let values: Vec<f64> = match &m {
            MetricSpec::Rmse { dims, k, .. } => {
                let k = k.unwrap_or(cfg.test.final_k);
                run.means
                    .iter()
                    .zip(&truth)
                    .map(|(p, z)| rmse_final_k(p, z, k, dims, &angles))
                    .collect::<Result<_>>()?
            }
            MetricSpec::Jeffreys { dims, bins, .. } => {
                let Some(samples) = &run.samples else {
                    notes.insert(format!("{tag}/{}", m.label()), "not computed: filter has no sampling distribution".into());
                    continue;
                };
                let mut skipped = 0;
                let mut vals = Vec::with_capacity(samples.len());
                for (s, z) in samples.iter().zip(&truth) {
                    let ne = normalized_errors(s, z, dims)?;
                    skipped += ne.skipped.len();
                    vals.push(jeffreys_vs_unit_gaussian(&ne.values, bins).unwrap_or(f64::NAN));
                }
                if skipped > 0 {
                    notes.insert(format!("{tag}/{}/skipped_cells", m.label()), skipped.to_string());
                }
                vals
            }
            MetricSpec::SuccessRate { groups, threshold, .. } => {
                let k = cfg.test.final_k;
                let mut vals = Vec::with_capacity(truth.len());
                for (p, z) in run.means.iter().zip(&truth) {
                    let mut ok = true;
                    for g in groups {
                        ok &= rmse_final_k(p, z, k, g, &angles)? < *threshold;
                    }
                    vals.push(if ok { 1.0 } else { 0.0 });
                }
                notes.insert(format!("{}/threshold", m.label()), threshold.to_string());
                vals
            }
        };
        rows.push(MetricRow::new(&run.filter, sigma, m.label(), model_seed, values));
    }
    Ok(rows)
}

/// Everything an experiment produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: MetricReport,
    pub timings: Timings,
    pub runs: Vec<(FilterRun, Option<u64>)>,
    pub models: Vec<TrainedModel>,
    pub test: TrajectoryBatch,
}

/// Why an experiment stopped, written to `failure.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub stage: String,
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
    pub config_hash: String,
    pub seed: u64,
}

fn rmse_curves(cfg: &ExperimentConfig, test: &TrajectoryBatch, runs: &[(FilterRun, Option<u64>)]) -> Result<CsvMatrix> {
    let truth = truth_sequences(test);
    let angles = cfg.env.space().angle_dims();
    let mut columns = vec!["step".to_string()];
    let mut curves = Vec::new();
    for (run, seed) in runs {
        for m in cfg.metric_specs() {
            if let MetricSpec::Rmse { label, dims, .. } = m {
                columns.push(match seed {
                    Some(s) => format!("{}[seed {s}]/{label}", run.filter),
                    None => format!("{}/{label}", run.filter),
                });
                curves.push(rmse_per_step(&run.means, &truth, &dims, &angles)?);
            }
        }
    }
    let rows = (0..test.steps())
        .map(|t| std::iter::once(t as f64).chain(curves.iter().map(|c| c[t])).collect())
        .collect();
    Ok(CsvMatrix::new(&cfg.hash(), cfg.seed, columns, rows))
}

fn grid(hash: &str, seed: u64, seq: &[DVector<f64>]) -> CsvMatrix {
    let n = seq[0].len();
    let columns = (0..n).map(|j| format!("z{j}")).collect();
    let rows = seq.iter().map(|v| v.iter().copied().collect()).collect();
    CsvMatrix::new(hash, seed, columns, rows)
}

fn eigen_histogram(hash: &str, seed: u64, model: &DbfModel) -> Result<Option<CsvMatrix>> {
    let Some(dynamics) = model.dynamics() else {
        return Ok(None);
    };
    let spec = dynamics.spectrum_report(20)?;
    let rows = spec
        .counts
        .iter()
        .enumerate()
        .map(|(i, c)| vec![spec.edges[i], spec.edges[i + 1], *c as f64])
        .collect();
    Ok(Some(CsvMatrix::new(hash, seed, vec!["bin_left".into(), "bin_right".into(), "count".into()], rows)))
}

struct Stage<'a> {
    name: &'a str,
}

/// Runs the full pipeline and writes all artifacts to `cfg.output_dir`. On
/// failure `failure.json` records the stage and the error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut stage = Stage { name: "validate" };
    let result = run_inner(cfg, &mut stage);
    if let Err(e) = &result {
        let failure = FailureReport {
            stage: stage.name.to_string(),
            kind: e.kind().into(),
            message: e.to_string(),
            exit_code: e.exit_code(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        };
        if fs::create_dir_all(&cfg.output_dir).is_ok() {
            let _ = fs::write(cfg.output_dir.join("failure.json"), serde_json::to_string_pretty(&failure).unwrap_or_default());
        }
    }
    result
}

fn run_inner(cfg: &ExperimentConfig, stage: &mut Stage) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    let _ = fs::remove_file(out.join("failure.json"));
    let hash = cfg.hash();
    fs::write(out.join("config.json"), cfg.to_json())?;

    stage.name = "data";
    let test = test_batch(cfg)?;
    test.write(&out, "test")?;

    let mut report = MetricReport::new(&cfg.name, cfg.env.name(), &hash, cfg.seed);
    let mut timings = Timings {
        config_hash: hash.clone(),
        seed: cfg.seed,
        ..Timings::default()
    };
    let n_samples = samples_needed(&cfg.metric_specs());
    let filter_seed = derive_seed(cfg.seed, TAG_FILTER);
    let mut runs: Vec<(FilterRun, Option<u64>)> = Vec::new();
    let mut models = Vec::new();
    for spec in cfg.filters() {
        match spec {
            FilterSpec::Dbf(d) => {
                stage.name = "train";
                let trained = obtain_models(cfg, d, Some(&out))?;
                let window = cfg.training.as_ref().map_or(50, |t| t.ma_window);
                for m in &trained {
                    report.training.push(train_summary(m, window));
                    timings.train_secs.insert(format!("dbf[seed {}]", m.model_seed), m.train_secs);
                }
                if trained.iter().all(|m| m.aborted().is_some()) {
                    return Err(HarnessError::Divergence(trained[0].aborted().unwrap_or_default().to_string()));
                }
                stage.name = "filter";
                for m in trained.iter().filter(|m| m.aborted().is_none()) {
                    let s = Some(m.model_seed);
                    let full = run_dbf(&m.model, &cfg.env, &test, false, n_samples, filter_seed)?;
                    let ioo = run_dbf(&m.model, &cfg.env, &test, true, 0, filter_seed)?;
                    if let Some(b) = &full.beliefs {
                        BeliefFile::new(b.clone(), None, format!("dbf seed {} config {hash}", m.model_seed))?.write(&out, &format!("beliefs_dbf_seed{}", m.model_seed))?;
                    }
                    if let Some(h) = eigen_histogram(&hash, cfg.seed, &m.model)? {
                        h.write(&out.join(format!("eigenvalues_seed{}.csv", m.model_seed)))?;
                    }
                    timings.inference_secs.insert(format!("dbf[seed {}]", m.model_seed), full.inference_secs);
                    runs.push((full, s));
                    runs.push((ioo, s));
                }
                for m in trained.iter().filter(|m| m.aborted().is_some()) {
                    report.notes.insert(format!("dbf[seed {}]/aborted", m.model_seed), m.aborted().unwrap_or_default().to_string());
                }
                models.extend(trained);
            }
            classic => {
                stage.name = "filter";
                let run = run_classic(classic, &cfg.env, &test, n_samples, filter_seed)?;
                if let Some(b) = &run.beliefs {
                    BeliefFile::new(b.clone(), None, format!("{} config {hash}", run.filter))?.write(&out, &format!("beliefs_{}", run.filter))?;
                }
                timings.inference_secs.insert(run.filter.clone(), run.inference_secs);
                runs.push((run, None));
            }
        }
    }

    stage.name = "metrics";
    for (run, seed) in &runs {
        let rows = evaluate_run(cfg, &test, run, *seed, &mut report.notes)?;
        report.rows.extend(rows);
    }

    stage.name = "report";
    report.write_json(&out.join("report.json"))?;
    report.write_csv(&out.join("report.csv"))?;
    timings.write_json(&out.join("timings.json"))?;
    rmse_curves(cfg, &test, &runs)?.write(&out.join("rmse_curve.csv"))?;
    if let EnvConfig::Lorenz96(_) = cfg.env {
        grid(&hash, cfg.seed, &test.state_sequence(0)).write(&out.join("hovmoller_truth.csv"))?;
        grid(&hash, cfg.seed, &test.obs_sequence(0)).write(&out.join("hovmoller_obs.csv"))?;
        for (run, seed) in &runs {
            let name = match seed {
                Some(s) => format!("hovmoller_{}_seed{s}.csv", run.filter),
                None => format!("hovmoller_{}.csv", run.filter),
            };
            grid(&hash, cfg.seed, &run.means[0]).write(&out.join(name))?;
        }
    }
    Ok(ExperimentOutput {
        report,
        timings,
        runs,
        models,
        test,
    })
}

/// One cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub latent_dim: usize,
    pub output_dir: PathBuf,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
    pub train_secs: f64,
    pub inference_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub seed: u64,
    pub cells: Vec<SweepCell>,
}

/// The config of one sweep cell: the base config at latent dimension `d`,
/// writing to its own subdirectory.
pub fn sweep_cell_config(cfg: &ExperimentConfig, d: usize) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    c.sweep = None;
    c.output_dir = cfg.output_dir.join(format!("d_h_{d}"));
    match &mut c.filter {
        FilterSpec::Dbf(spec) => spec.latent_dim = d,
        _ => return Err(HarnessError::Config("latent-dimension sweeps need a dbf filter".into())),
    }
    Ok(c)
}

/// Runs every cell of the grid; failures are recorded and the sweep goes on.
/// Writes `sweep.json` and `sweep.csv` (one line per cell × row, with
/// runtime columns).
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| HarnessError::Config("config has no sweep section".into()))?
        .latent_dims
        .clone();
    fs::create_dir_all(&cfg.output_dir)?;
    let mut cells = Vec::new();
    for d in grid {
        let c = sweep_cell_config(cfg, d)?;
        let (report, error, train_secs, inference_secs) = match run_experiment(&c) {
            Ok(o) => (
                Some(o.report),
                None,
                o.timings.train_secs.values().sum(),
                o.timings.inference_secs.values().sum(),
            ),
            Err(e) => (None, Some(e.to_string()), 0.0, 0.0),
        };
        cells.push(SweepCell {
            latent_dim: d,
            output_dir: c.output_dir,
            report,
            error,
            train_secs,
            inference_secs,
        });
    }
    let rep = SweepReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        cells,
    };
    fs::write(cfg.output_dir.join("sweep.json"), serde_json::to_string_pretty(&rep)?)?;
    let mut w = csv::Writer::from_path(cfg.output_dir.join("sweep.csv"))?;
    w.write_record(["latent_dim", "status", "filter", "metric", "model_seed", "mean", "std", "train_secs", "inference_secs", "config_hash", "seed"])?;
    for c in &rep.cells {
        let status = if c.error.is_some() { "failed" } else { "ok" };
        let base = |filter: &str, metric: &str, seed: String, mean: String, std: String| {
            vec![
                c.latent_dim.to_string(),
                status.to_string(),
                filter.to_string(),
                metric.to_string(),
                seed,
                mean,
                std,
                c.train_secs.to_string(),
                c.inference_secs.to_string(),
                rep.config_hash.clone(),
                rep.seed.to_string(),
            ]
        };
        match &c.report {
            Some(r) => {
                for row in &r.rows {
                    w.write_record(base(
                        &row.filter,
                        &row.metric,
                        row.model_seed.map(|s| s.to_string()).unwrap_or_default(),
                        row.mean.to_string(),
                        row.std.to_string(),
                    ))?;
                }
            }
            None => w.write_record(base("", "", String::new(), String::new(), String::new()))?,
        }
    }
    w.flush()?;
    Ok(rep)
}
