//! Reports and plot data. JSON for machines, CSV tables keyed
//! filter × σ × metric, and CSV matrices for curves and diagrams. Every
//! artifact carries the config hash and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::metrics::Summary;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub filter: String,
    /// Observation noise level of the environment, if it has a single one.
    pub sigma: Option<f64>,
    pub metric: String,
    /// Seed of the trained model the row belongs to (learned filters only).
    pub model_seed: Option<u64>,
    pub per_trajectory: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricRow {
    pub fn new(filter: &str, sigma: Option<f64>, metric: &str, model_seed: Option<u64>, per_trajectory: Vec<f64>) -> Self {
        let s = Summary::of(&per_trajectory);
        MetricRow {
            filter: filter.into(),
            sigma,
            metric: metric.into(),
            model_seed,
            per_trajectory,
            mean: s.mean,
            std: s.std,
        }
    }

    /// True when the aggregate equals a recomputation from the values.
    pub fn is_consistent(&self) -> bool {
        let s = Summary::of(&self.per_trajectory);
        same(s.mean, self.mean) && same(s.std, self.std)
    }
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model_seed: u64,
    pub steps: usize,
    pub epochs_completed: usize,
    pub aborted: Option<String>,
    pub hit_time_limit: bool,
    /// Loss moving average at the start and at the end of training.
    pub loss_ma_first: f64,
    pub loss_ma_last: f64,
    pub max_abs_eigenvalue: Option<f64>,
}

impl TrainSummary {
    pub fn completed(&self) -> bool {
        self.aborted.is_none()
    }

    /// The ELBO rose, i.e. the loss moving average fell.
    pub fn improved(&self) -> bool {
        self.loss_ma_last < self.loss_ma_first
    }
}

/// Everything measured by one experiment, minus wall-clock times, so the
/// report is a pure function of (config, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub report_version: u32,
    pub name: String,
    pub env: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    #[serde(default)]
    pub training: Vec<TrainSummary>,
    /// Free-form facts worth keeping with the numbers (thresholds, skipped
    /// calibration cells, …).
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new(name: &str, env: &str, config_hash: &str, seed: u64) -> Self {
        MetricReport {
            report_version: REPORT_VERSION,
            name: name.into(),
            env: env.into(),
            config_hash: config_hash.into(),
            seed,
            rows: Vec::new(),
            training: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn row(&self, filter: &str, metric: &str, model_seed: Option<u64>) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.filter == filter && r.metric == metric && r.model_seed == model_seed)
    }

    pub fn is_consistent(&self) -> bool {
        self.rows.iter().all(MetricRow::is_consistent)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// One line per (filter, σ, metric, model seed).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["filter", "sigma", "metric", "model_seed", "mean", "std", "n", "config_hash", "seed"])?;
        for r in &self.rows {
            w.write_record([
                r.filter.clone(),
                r.sigma.map(|s| s.to_string()).unwrap_or_default(),
                r.metric.clone(),
                r.model_seed.map(|s| s.to_string()).unwrap_or_default(),
                r.mean.to_string(),
                r.std.to_string(),
                r.per_trajectory.len().to_string(),
                self.config_hash.clone(),
                self.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Wall-clock measurements, kept apart from the deterministic report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub config_hash: String,
    pub seed: u64,
    pub train_secs: BTreeMap<String, f64>,
    pub inference_secs: BTreeMap<String, f64>,
}

impl Timings {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// A named-column numeric table with a provenance line, e.g. an
/// RMSE-vs-step curve or a Hovmöller grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvMatrix {
    pub config_hash: String,
    pub seed: u64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvMatrix {
    pub fn new(config_hash: &str, seed: u64, columns: Vec<String>, rows: Vec<Vec<f64>>) -> Self {
        CsvMatrix {
            config_hash: config_hash.into(),
            seed,
            columns,
            rows,
        }
    }

    /// First line `# config_hash=<h> seed=<s>`, then a header and the rows.
    /// Floats are written in shortest round-trip form.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = format!("# config_hash={} seed={}\n", self.config_hash, self.seed);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            if r.len() != self.columns.len() {
                return Err(HarnessError::Metric(format!("row of {} values for {} columns", r.len(), self.columns.len())));
            }
            w.write_record(r.iter().map(|v| format!("{v:?}")))?;
        }
        let body = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
        out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let (first, rest) = text.split_once('\n').ok_or_else(|| HarnessError::Metric("empty matrix file".into()))?;
        let bad = || HarnessError::Metric(format!("malformed provenance line in {}", path.display()));
        let mut hash = None;
        let mut seed = None;
        for tok in first.trim_start_matches('#').split_whitespace() {
            match tok.split_once('=') {
                Some(("config_hash", v)) => hash = Some(v.to_string()),
                Some(("seed", v)) => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
                _ => {}
            }
        }
        let mut r = csv::Reader::from_reader(rest.as_bytes());
        let columns = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            rows.push(
                rec.iter()
                    .map(|s| s.parse::<f64>().map_err(|_| HarnessError::Metric(format!("bad number `{s}`"))))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(CsvMatrix {
            config_hash: hash.ok_or_else(bad)?,
            seed: seed.ok_or_else(bad)?,
            columns,
            rows,
        })
    }
}
