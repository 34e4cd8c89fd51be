//! Minibatch Adam on either objective. A minibatch is split into fixed-size
//! chunks; each chunk builds its own tape on a worker thread and the chunk
//! gradients are summed in chunk order, so results depend on the seed and
//! the chunk size but not on the thread count.

use std::path::PathBuf;
use std::time::Instant;

use dbf_base::envs::trajectory::{generate_range, substream};
use dbf_base::envs::{EnvConfig, TrajectoryBatch};
use dbf_nn::{sum_gradients, Adam, ParamSet, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elbo::{elbo_joint, elbo_linear, Elbo, Minibatch, ObservationModel};
use crate::error::{DbfError, Result};
use crate::model::DbfModel;

/// Anything that can hand out minibatches of trajectories by index.
pub trait DataSource: Sync {
    fn len(&self) -> usize;
    fn steps(&self) -> usize;
    fn minibatch(&self, indices: &[usize]) -> Result<Minibatch>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn stack(batch: &TrajectoryBatch, indices: &[usize], offset: usize, with_states: bool) -> Result<Minibatch> {
    let (b, steps) = (indices.len(), batch.steps());
    let mut obs = Vec::with_capacity(b * steps * batch.obs_dim());
    let mut states = Vec::with_capacity(b * steps * batch.state_dim());
    for t in 0..steps {
        for &i in indices {
            obs.extend_from_slice(batch.obs(i - offset, t));
            if with_states {
                states.extend_from_slice(batch.state(i - offset, t));
            }
        }
    }
    let obs = Tensor::new(b * steps, batch.obs_dim(), obs);
    let states = with_states.then(|| Tensor::new(b * steps, batch.state_dim(), states));
    Minibatch::new(b, steps, obs, states)
}

impl DataSource for TrajectoryBatch {
    fn len(&self) -> usize {
        self.count()
    }

    fn steps(&self) -> usize {
        TrajectoryBatch::steps(self)
    }

    fn minibatch(&self, indices: &[usize]) -> Result<Minibatch> {
        stack(self, indices, 0, true)
    }
}

/// Regenerates trajectories on demand from `(env, seed, index)` instead of
/// holding the whole training set in memory.
#[derive(Clone, Debug)]
pub struct GeneratedSource {
    pub env: EnvConfig,
    pub steps: usize,
    pub count: usize,
    pub seed: u64,
}

impl DataSource for GeneratedSource {
    fn len(&self) -> usize {
        self.count
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn minibatch(&self, indices: &[usize]) -> Result<Minibatch> {
        let parts = indices
            .iter()
            .map(|&i| generate_range(&self.env, self.steps, i, 1, self.seed))
            .collect::<dbf_base::Result<Vec<_>>>()?;
        let mut merged = parts[0].clone();
        merged.states.clear();
        merged.observations.clear();
        for p in &parts {
            merged.states.extend_from_slice(&p.states);
            merged.observations.extend_from_slice(&p.observations);
        }
        merged.manifest.count = indices.len();
        stack(&merged, &(0..indices.len()).collect::<Vec<_>>(), 0, true)
    }
}

/// Drops the paired states, for objectives that must not see them.
pub struct ObservationsOnly<'a, D: DataSource + ?Sized>(pub &'a D);

impl<D: DataSource + ?Sized> DataSource for ObservationsOnly<'_, D> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn steps(&self) -> usize {
        self.0.steps()
    }

    fn minibatch(&self, indices: &[usize]) -> Result<Minibatch> {
        let mut mb = self.0.minibatch(indices)?;
        mb.states = None;
        Ok(mb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimiser steps (overrides `epochs` when smaller).
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Sequences per tape; chunks run in parallel.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    pub seed: u64,
    /// Epochs during which `G` (the IOO variance net) is frozen.
    #[serde(default)]
    pub freeze_g_epochs: usize,
    /// Parameter-name prefixes never updated.
    #[serde(default)]
    pub frozen_prefixes: Vec<String>,
    /// Stop (without error) after this many seconds.
    #[serde(default)]
    pub time_limit_secs: Option<f64>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_chunk() -> usize {
    8
}

fn default_checkpoint_every() -> usize {
    500
}

impl TrainOptions {
    pub fn new(lr: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainOptions {
            lr,
            batch_size,
            epochs,
            max_steps: None,
            chunk: default_chunk(),
            seed,
            freeze_g_epochs: 0,
            frozen_prefixes: Vec::new(),
            time_limit_secs: None,
            checkpoint_dir: None,
            checkpoint_every: default_checkpoint_every(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.chunk == 0 {
            return Err(DbfError::Config("batch size and chunk must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(DbfError::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub expected_loglik: Vec<f64>,
    pub kl: Vec<f64>,
    pub steps: usize,
    pub epochs_completed: usize,
    /// Why training stopped early on a numerical failure, if it did.
    pub aborted: Option<String>,
    pub hit_time_limit: bool,
    pub wall_secs: f64,
}

impl TrainReport {
    /// Trailing moving average with the given window (shorter at the start).
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.losses.len());
        let mut acc = 0.0;
        for (i, l) in self.losses.iter().enumerate() {
            acc += l;
            if i >= w {
                acc -= self.losses[i - w];
            }
            out.push(acc / (i + 1).min(w) as f64);
        }
        out
    }
}

/// One objective evaluation on a tape.
pub trait Objective: Sync {
    fn evaluate<'t>(&self, model: &DbfModel, p: &dbf_nn::Bound<'t>, tape: &'t Tape, mb: &Minibatch, rng: &mut ChaCha8Rng) -> Result<Elbo<'t>>;
}

pub struct JointObjective;

impl Objective for JointObjective {
    fn evaluate<'t>(&self, model: &DbfModel, p: &dbf_nn::Bound<'t>, tape: &'t Tape, mb: &Minibatch, rng: &mut ChaCha8Rng) -> Result<Elbo<'t>> {
        elbo_joint(model, p, tape, mb, rng)
    }
}

pub struct LinearObjective<'a, O: ObservationModel + ?Sized> {
    pub obs: &'a O,
    pub closed_form: bool,
}

impl<O: ObservationModel + ?Sized> Objective for LinearObjective<'_, O> {
    fn evaluate<'t>(&self, model: &DbfModel, p: &dbf_nn::Bound<'t>, tape: &'t Tape, mb: &Minibatch, rng: &mut ChaCha8Rng) -> Result<Elbo<'t>> {
        elbo_linear(model, self.obs, p, tape, mb, self.closed_form, rng)
    }
}

/// Loss, parts and gradients of one minibatch, evaluated chunk-parallel.
pub struct StepEval {
    pub loss: f64,
    pub expected_loglik: f64,
    pub kl: f64,
    pub grads: Vec<Tensor>,
}

/// Evaluates the objective and its gradient on `mb`. `rng_key` selects the
/// noise substream.
pub fn evaluate_minibatch<J: Objective + ?Sized>(model: &DbfModel, params: &ParamSet, objective: &J, mb: &Minibatch, chunk: usize, seed: u64, rng_key: usize) -> Result<StepEval> {
    let n_chunks = mb.batch.div_ceil(chunk);
    let total = mb.batch as f64;
    let parts = (0..n_chunks)
        .into_par_iter()
        .map(|c| -> Result<(f64, f64, f64, Vec<Tensor>)> {
            let start = c * chunk;
            let len = chunk.min(mb.batch - start);
            let sub = if n_chunks == 1 { mb.clone() } else { mb.sub_batch(start, len) };
            let tape = Tape::new();
            let p = params.bind(&tape);
            let mut rng = substream(seed, rng_key, c);
            let elbo = objective.evaluate(model, &p, &tape, &sub, &mut rng)?;
            let w = len as f64 / total;
            let scaled = elbo.loss.scale(w);
            let grads = tape.backward(scaled);
            Ok((scaled.item(), elbo.expected_loglik * w, elbo.kl * w, p.gradients(&grads)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut loss, mut ll, mut kl) = (0.0, 0.0, 0.0);
    let mut grads = Vec::with_capacity(parts.len());
    for (l, e, k, g) in parts {
        loss += l;
        ll += e;
        kl += k;
        grads.push(g);
    }
    Ok(StepEval {
        loss,
        expected_loglik: ll,
        kl,
        grads: sum_gradients(grads).expect("at least one chunk"),
    })
}

/// Generic loop shared by both strategies.
pub fn train<D: DataSource + ?Sized, J: Objective + ?Sized>(model: &mut DbfModel, data: &D, objective: &J, opts: &TrainOptions) -> Result<TrainReport> {
    opts.validate()?;
    let started = Instant::now();
    let mut report = TrainReport::default();
    let n = data.len();
    if n == 0 {
        return Err(DbfError::Config("training set is empty".into()));
    }
    let per_epoch = n.div_ceil(opts.batch_size);
    let budget = opts.max_steps.unwrap_or(usize::MAX).min(per_epoch.saturating_mul(opts.epochs));
    let mut adam = Adam::new(opts.lr, &model.params);
    let names = model.params.names().to_vec();
    let base_mask: Vec<bool> = names
        .iter()
        .map(|n| !opts.frozen_prefixes.iter().any(|p| n.starts_with(p.as_str())))
        .collect();
    let g_mask = model.g_param_mask();
    let mut shuffle = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;

    'outer: for epoch in 0..opts.epochs {
        if step >= budget {
            break;
        }
        order.shuffle(&mut shuffle);
        let mask: Vec<bool> = base_mask
            .iter()
            .zip(&g_mask)
            .map(|(b, g)| *b && !(epoch < opts.freeze_g_epochs && *g))
            .collect();
        for idx in order.chunks(opts.batch_size) {
            if step >= budget {
                break 'outer;
            }
            if let Some(limit) = opts.time_limit_secs {
                if started.elapsed().as_secs_f64() > limit {
                    report.hit_time_limit = true;
                    break 'outer;
                }
            }
            let mb = data.minibatch(idx)?;
            let eval = evaluate_minibatch(model, &model.params, objective, &mb, opts.chunk, opts.seed, step);
            let eval = match eval {
                Ok(e) if e.loss.is_finite() => e,
                Ok(e) => {
                    report.aborted = Some(format!("non-finite loss {} at step {step}", e.loss));
                    break 'outer;
                }
                Err(e) if e.is_numerical() => {
                    report.aborted = Some(format!("step {step}: {e}"));
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            if let Err(e) = adam.update(&mut model.params, &eval.grads, Some(&mask)) {
                report.aborted = Some(format!("step {step}: {e}"));
                break 'outer;
            }
            report.losses.push(eval.loss);
            report.expected_loglik.push(eval.expected_loglik);
            report.kl.push(eval.kl);
            step += 1;
            if let Some(dir) = &opts.checkpoint_dir {
                if step % opts.checkpoint_every.max(1) == 0 {
                    model.save(dir, "last_good", serde_json::json!({ "step": step }))?;
                }
            }
        }
        report.epochs_completed = epoch + 1;
    }
    report.steps = step;
    report.wall_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = &opts.checkpoint_dir {
        // parameters are only written after a successful step, so this is
        // the last good state even after an abort
        model.save(dir, "last_good", serde_json::json!({ "step": step, "aborted": report.aborted }))?;
        std::fs::write(dir.join("train_report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// Trains every component on the joint objective over states and
/// observations.
pub fn train_joint<D: DataSource + ?Sized>(model: &mut DbfModel, data: &D, opts: &TrainOptions) -> Result<TrainReport> {
    if !model.has_emission() {
        return Err(DbfError::Config("joint training needs an emission model".into()));
    }
    train(model, data, &JointObjective, opts)
}

/// Trains the IOO and any observation-model parameters from observations
/// alone. Paired states in `data` are ignored.
pub fn train_linear<D: DataSource + ?Sized, O: ObservationModel + ?Sized>(
    model: &mut DbfModel,
    obs_model: &O,
    data: &D,
    closed_form: bool,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let objective = LinearObjective {
        obs: obs_model,
        closed_form,
    };
    train(model, &ObservationsOnly(data), &objective, opts)
}
