//! The two training objectives. Both are negated ELBOs summed over time and
//! averaged over the minibatch:
//!
//! * joint: `−Σ_t E_q[ln p(z_t|h_t)] − KL(q(h_t|o_{1:t}) ‖ q(h_t|o_{1:t−1}))`,
//!   with `z_t` the paired physical state and `p(z|h)` the emission model;
//! * linear: the same with `ln p(o_t|z_t)` from a (partly) known observation
//!   model and the latent equal to the physical state.
//!
//! At `t = 1` the prior in the KL is the initial belief.



use dbf_base::envs::bounce::{bounce_reflect, bounce_reflect_slope, render_frame, render_vjp};
use dbf_base::{Error as BaseError, GaussianBelief};
use dbf_nn::{concat_rows, Bound, ParamId, ParamSet, Tape, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::batched::{self, BlockBelief};
use crate::error::{DbfError, Result};
use crate::model::{DbfModel, EmissionFamily, TapeStep};
use crate::vonmises::{bessel_ratio, log_i0};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Trajectories stacked time-major: row `t·batch + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub batch: usize,
    pub steps: usize,
    pub obs: Tensor,
    /// Paired physical states (joint objective only).
    pub states: Option<Tensor>,
}

impl Minibatch {
    pub fn new(batch: usize, steps: usize, obs: Tensor, states: Option<Tensor>) -> Result<Self> {
        if obs.rows != batch * steps {
            return Err(BaseError::dims("minibatch observation rows", batch * steps, obs.rows).into());
        }
        if let Some(s) = &states {
            if s.rows != batch * steps {
                return Err(BaseError::dims("minibatch state rows", batch * steps, s.rows).into());
            }
        }
        Ok(Minibatch { batch, steps, obs, states })
    }

    /// Stacks per-sequence `(T × d)` arrays given as closures `(seq, t) → row`.
    pub fn from_fn(batch: usize, steps: usize, obs: impl Fn(usize, usize) -> Vec<f64>, states: Option<&dyn Fn(usize, usize) -> Vec<f64>>) -> Result<Self> {
        let stack = |f: &dyn Fn(usize, usize) -> Vec<f64>| -> Tensor {
            let mut data = Vec::new();
            let mut width = 0;
            for t in 0..steps {
                for b in 0..batch {
                    let row = f(b, t);
                    width = row.len();
                    data.extend(row);
                }
            }
            Tensor::new(batch * steps, width, data)
        };
        let o = stack(&obs);
        let s = states.map(stack);
        Minibatch::new(batch, steps, o, s)
    }

    /// Rows `[start, start + len)` of the batch dimension.
    pub fn sub_batch(&self, start: usize, len: usize) -> Minibatch {
        let take = |x: &Tensor| {
            let mut data = Vec::with_capacity(len * self.steps * x.cols);
            for t in 0..self.steps {
                for b in start..start + len {
                    data.extend_from_slice(x.row_slice(t * self.batch + b));
                }
            }
            Tensor::new(len * self.steps, x.cols, data)
        };
        Minibatch {
            batch: len,
            steps: self.steps,
            obs: take(&self.obs),
            states: self.states.as_ref().map(take),
        }
    }
}

/// The loss and its two parts (both already normalised like the loss).
pub struct Elbo<'t> {
    pub loss: Var<'t>,
    pub expected_loglik: f64,
    pub kl: f64,
}

/// `ln I₀(κ)` on the tape, with derivative `I₁(κ)/I₀(κ)`.
pub fn log_i0_var(kappa: Var<'_>) -> Var<'_> {
    kappa.unary(log_i0, |k, _| bessel_ratio(k))
}

/// Per-element log-density of `z` under the emission: Gaussian columns use
/// `N(μ, σ²)` with `σ = e^{s}`, von Mises columns `VM(μ, κ)` with `κ = e^{s}`.
/// `log_scale` is `1 × d_z`. Returns a scalar sum.
pub fn emission_loglik<'t>(families: &[EmissionFamily], mean: Var<'t>, z: Var<'t>, log_scale: Var<'t>) -> Var<'t> {
    let gauss: Vec<usize> = (0..families.len()).filter(|&j| families[j] == EmissionFamily::Gaussian).collect();
    let vm: Vec<usize> = (0..families.len()).filter(|&j| families[j] == EmissionFamily::VonMises).collect();
    let rows = mean.rows() as f64;
    let mut parts = Vec::new();
    if !gauss.is_empty() {
        let s = log_scale.gather_cols(&gauss);
        let r = (z.gather_cols(&gauss) - mean.gather_cols(&gauss)) * (-s).exp();
        let quad = r.square().sum().scale(-0.5);
        let norm = (s.sum().add_scalar(0.5 * LN_2PI * gauss.len() as f64)).scale(-rows);
        parts.push(quad + norm);
    }
    if !vm.is_empty() {
        let s = log_scale.gather_cols(&vm);
        let kappa = s.exp();
        let c = (z.gather_cols(&vm) - mean.gather_cols(&vm)).cos();
        let fit = (c * kappa).sum();
        let norm = (log_i0_var(kappa).sum().add_scalar(LN_2PI * vm.len() as f64)).scale(-rows);
        parts.push(fit + norm);
    }
    let mut it = parts.into_iter();
    let first = it.next().expect("emission has at least one dimension");
    it.fold(first, |a, b| a + b)
}

/// Draws `samples` reparametrised latent samples per step and sequence.
/// Returns `(T·K·B) × d`, ordered `(t, k, b)`.
fn draw_samples<'t, R: Rng + ?Sized>(tape: &'t Tape, steps: &[TapeStep<'t>], samples: usize, rng: &mut R) -> Var<'t> {
    let mut rows = Vec::with_capacity(steps.len() * samples);
    for s in steps {
        let post = &s.update.post;
        let (b, n) = (post.mx.rows(), post.mx.cols());
        for _ in 0..samples {
            let mut eps = || tape.constant(Tensor::from_fn(b, n, |_, _| rng.sample(StandardNormal)));
            let (ex, ey) = (eps(), eps());
            let (hx, hy) = batched::sample(post, ex, ey);
            rows.push(batched::interleave(hx, hy));
        }
    }
    concat_rows(&rows)
}

/// Row indices that repeat each time step's `batch` rows `samples` times,
/// matching [`draw_samples`].
fn repeat_index(batch: usize, steps: usize, samples: usize) -> Vec<usize> {
    (0..steps)
        .flat_map(|t| (0..samples).flat_map(move |_| (0..batch).map(move |b| t * batch + b)))
        .collect()
}

fn kl_total<'t>(steps: &[TapeStep<'t>]) -> Var<'t> {
    let terms: Vec<Var<'t>> = steps
        .iter()
        .map(|s| batched::kl(&s.update.post, s.prior_mean, &s.update.prior, s.update.post_log_det).sum())
        .collect();
    let mut it = terms.into_iter();
    let first = it.next().expect("at least one step");
    it.fold(first, |a, b| a + b)
}

/// Negated joint ELBO over states and observations.
pub fn elbo_joint<'t, R: Rng + ?Sized>(model: &DbfModel, p: &Bound<'t>, tape: &'t Tape, mb: &Minibatch, rng: &mut R) -> Result<Elbo<'t>> {
    let states = mb
        .states
        .as_ref()
        .ok_or_else(|| DbfError::Config("joint objective needs paired states".into()))?;
    if !model.has_emission() {
        return Err(DbfError::Config("joint objective needs an emission model".into()));
    }
    let k = model.config.samples;
    let obs = tape.constant(mb.obs.clone());
    let steps = model.filter_tape(p, tape, obs, mb.batch, mb.steps)?;
    let h = draw_samples(tape, &steps, k, rng);
    let mean = model.decode_tape(p, h);
    let z = tape.constant(states.clone()).gather_rows(&repeat_index(mb.batch, mb.steps, k));
    let ll = emission_loglik(model.families(), mean, z, model.log_scale_tape(p)).scale(1.0 / k as f64);
    let kl = kl_total(&steps);
    finish(ll, kl, mb.batch)
}

fn finish<'t>(ll: Var<'t>, kl: Var<'t>, batch: usize) -> Result<Elbo<'t>> {
    let b = batch as f64;
    let loss = (kl - ll).scale(1.0 / b);
    Ok(Elbo {
        expected_loglik: ll.item() / b,
        kl: kl.item() / b,
        loss,
    })
}

/// `ln p(o|z)` for a model that assimilates in physical space. Must be
/// `Sync`: minibatch chunks evaluate it from several threads.
pub trait ObservationModel: Sync {
    /// Scalar `Σ_rows ln p(o_row | z_row)` for `rows × d_z` samples.
    fn loglik<'t>(&self, p: &Bound<'t>, z: Var<'t>, o: Var<'t>) -> Var<'t>;

    /// Closed-form `Σ_b E_q[ln p(o_b|z)]` if available.
    fn expected_loglik<'t>(&self, _p: &Bound<'t>, _q: &BlockBelief<'t>, _o: Var<'t>) -> Option<Var<'t>> {
        None
    }

    /// Parameter names this model owns (trained alongside the IOO).
    fn param_names(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Negated ELBO with a known (or partly known) observation model.
/// `closed_form` uses the analytic expectation when the model offers one.
pub fn elbo_linear<'t, O: ObservationModel + ?Sized, R: Rng + ?Sized>(
    model: &DbfModel,
    obs_model: &O,
    p: &Bound<'t>,
    tape: &'t Tape,
    mb: &Minibatch,
    closed_form: bool,
    rng: &mut R,
) -> Result<Elbo<'t>> {
    let k = model.config.samples;
    let obs = tape.constant(mb.obs.clone());
    let steps = model.filter_tape(p, tape, obs, mb.batch, mb.steps)?;
    let mut ll = None;
    if closed_form {
        let mut terms = Vec::with_capacity(mb.steps);
        for (t, s) in steps.iter().enumerate() {
            match obs_model.expected_loglik(p, &s.update.post, obs.slice_rows(t * mb.batch, mb.batch)) {
                Some(v) => terms.push(v),
                None => break,
            }
        }
        if terms.len() == mb.steps {
            let mut it = terms.into_iter();
            let first = it.next().expect("at least one step");
            ll = Some(it.fold(first, |a, b| a + b));
        }
    }
    let ll = match ll {
        Some(v) => v,
        None => {
            let z = draw_samples(tape, &steps, k, rng);
            let o = obs.gather_rows(&repeat_index(mb.batch, mb.steps, k));
            obs_model.loglik(p, z, o).scale(1.0 / k as f64)
        }
    };
    finish(ll, kl_total(&steps), mb.batch)
}

/// `o = Hz + ε`, `ε ~ N(0, diag(r))`, with `H` and `r` fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianObs {
    pub h: DMatrix<f64>,
    pub r_diag: Vec<f64>,
}

impl LinearGaussianObs {
    pub fn new(h: DMatrix<f64>, r_diag: Vec<f64>) -> Result<Self> {
        if h.nrows() != r_diag.len() {
            return Err(BaseError::dims("observation noise", h.nrows(), r_diag.len()).into());
        }
        if r_diag.iter().any(|r| !(*r > 0.0)) {
            return Err(BaseError::InvalidArgument("observation noise variances must be > 0".into()).into());
        }
        Ok(LinearGaussianObs { h, r_diag })
    }

    fn ht<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.constant(Tensor::from_fn(self.h.ncols(), self.h.nrows(), |i, j| self.h[(j, i)]))
    }

    fn norm_const(&self) -> f64 {
        -0.5 * self.r_diag.iter().map(|r| LN_2PI + r.ln()).sum::<f64>()
    }
}

impl ObservationModel for LinearGaussianObs {
    fn loglik<'t>(&self, _p: &Bound<'t>, z: Var<'t>, o: Var<'t>) -> Var<'t> {
        let tape = z.tape();
        let rinv = tape.constant(Tensor::row(self.r_diag.iter().map(|r| 1.0 / r).collect()));
        let resid = o - z.matmul(self.ht(tape));
        (resid.square() * rinv).sum().scale(-0.5).add_scalar(self.norm_const() * z.rows() as f64)
    }

    fn expected_loglik<'t>(&self, _p: &Bound<'t>, q: &BlockBelief<'t>, o: Var<'t>) -> Option<Var<'t>> {
        let tape = o.tape();
        let rows = o.rows();
        let n = q.mx.cols();
        let rinv = tape.constant(Tensor::row(self.r_diag.iter().map(|r| 1.0 / r).collect()));
        let mu = batched::interleave(q.mx, q.my);
        let quad = ((o - mu.matmul(self.ht(tape))).square() * rinv).sum();
        // tr(HᵀR⁻¹H Σ) on the block diagonal of Σ
        let r = DMatrix::from_diagonal(&DVector::from_iterator(self.r_diag.len(), self.r_diag.iter().map(|r| 1.0 / r)));
        let m = self.h.transpose() * r * &self.h;
        let row = |f: &dyn Fn(usize) -> f64| tape.constant(Tensor::row((0..n).map(f).collect()));
        let cxx = row(&|i| m[(2 * i, 2 * i)]);
        let cxy = row(&|i| 2.0 * m[(2 * i, 2 * i + 1)]);
        let cyy = row(&|i| m[(2 * i + 1, 2 * i + 1)]);
        let tr = (cxx * q.sxx + cxy * q.sxy + cyy * q.syy).sum();
        Some((quad + tr).scale(-0.5).add_scalar(self.norm_const() * rows as f64))
    }
}

/// `E_{N(μ,Σ)}[ln N(o; Hz, diag(r))]` in closed form, for any belief.
pub fn gaussian_expected_loglik(belief: &GaussianBelief, h: &DMatrix<f64>, r_diag: &[f64], o: &DVector<f64>) -> f64 {
    let resid = o - h * belief.mean();
    let hsh = h * belief.dense_cov() * h.transpose();
    let mut acc = 0.0;
    for i in 0..o.len() {
        acc += -0.5 * (LN_2PI + r_diag[i].ln()) - 0.5 * (resid[i] * resid[i] + hsh[(i, i)]) / r_diag[i];
    }
    acc
}

/// Renders patches at folded positions taken from latent samples. The latent
/// is pair-ordered: `h[4o]` and `h[4o+2]` are the x and y coordinates of
/// object `o` (each followed by its velocity). Pixel noise is `N(0, σ²)`.
#[derive(Clone, Debug)]
pub struct BouncePatchObs {
    pub frame: usize,
    pub patch: usize,
    pub n_objects: usize,
    pub sigma: f64,
    pub patches: ParamId,
}

impl BouncePatchObs {
    /// Registers `obs.patches` (`n_objects × patch²`) in `params`.
    pub fn new(params: &mut ParamSet, frame: usize, patch: usize, n_objects: usize, sigma: f64, init: Vec<Vec<f64>>) -> Result<Self> {
        if init.len() != n_objects || init.iter().any(|p| p.len() != patch * patch) {
            return Err(DbfError::Config(format!("expected {n_objects} patches of {} values", patch * patch)));
        }
        if !(sigma > 0.0) || patch >= frame {
            return Err(DbfError::Config("patch observation needs sigma > 0 and patch < frame".into()));
        }
        let data = init.into_iter().flatten().collect();
        let patches = match params.find("obs.patches") {
            Some(id) => {
                *params.get_mut(id) = Tensor::new(n_objects, patch * patch, data);
                id
            }
            None => params.add("obs.patches", Tensor::new(n_objects, patch * patch, data)),
        };
        Ok(BouncePatchObs {
            frame,
            patch,
            n_objects,
            sigma,
            patches,
        })
    }

    pub fn period(&self) -> f64 {
        (self.frame - self.patch) as f64
    }

    pub fn current_patches(&self, params: &ParamSet) -> Vec<Vec<f64>> {
        let t = params.get(self.patches);
        (0..t.rows).map(|i| t.row_slice(i).to_vec()).collect()
    }

    /// Renders every row of `z` on the tape (`rows × frame²`).
    pub fn render<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Var<'t> {
        let tape = z.tape();
        let pv = p[self.patches];
        let (frame, patch, n_obj, period) = (self.frame, self.patch, self.n_objects, self.period());
        let d = z.cols();
        let (value, positions) = {
            let zt = z.value();
            let pt = pv.value();
            let pats: Vec<Vec<f64>> = (0..pt.rows).map(|i| pt.row_slice(i).to_vec()).collect();
            let mut out = Tensor::zeros(zt.rows, frame * frame);
            let mut all_pos = Vec::with_capacity(zt.rows);
            for r in 0..zt.rows {
                let row = zt.row_slice(r);
                let pos: Vec<(f64, f64)> = (0..n_obj)
                    .map(|o| (bounce_reflect(row[4 * o], period), bounce_reflect(row[4 * o + 2], period)))
                    .collect();
                let img = render_frame(frame, patch, &pats, &pos);
                out.data[r * frame * frame..(r + 1) * frame * frame].copy_from_slice(&img);
                all_pos.push(pos);
            }
            (out, all_pos)
        };
        tape.custom(
            &[z, pv],
            value,
            Box::new(move |c| {
                let (zt, pt, g) = (c.inputs[0], c.inputs[1], c.grad);
                let pats: Vec<Vec<f64>> = (0..pt.rows).map(|i| pt.row_slice(i).to_vec()).collect();
                let mut gz = Tensor::zeros(zt.rows, d);
                let mut gp = Tensor::zeros(pt.rows, pt.cols);
                for (r, pos) in positions.iter().enumerate() {
                    let (g_pat, g_pos) = render_vjp(frame, patch, &pats, pos, g.row_slice(r));
                    let row = zt.row_slice(r);
                    for o in 0..n_obj {
                        gz.set(r, 4 * o, g_pos[o].0 * bounce_reflect_slope(row[4 * o], period));
                        gz.set(r, 4 * o + 2, g_pos[o].1 * bounce_reflect_slope(row[4 * o + 2], period));
                        for (k, v) in g_pat[o].iter().enumerate() {
                            gp.data[o * pt.cols + k] += v;
                        }
                    }
                }
                vec![Some(gz), Some(gp)]
            }),
        )
    }
}

impl ObservationModel for BouncePatchObs {
    fn loglik<'t>(&self, p: &Bound<'t>, z: Var<'t>, o: Var<'t>) -> Var<'t> {
        let img = self.render(p, z);
        let n = (z.rows() * self.frame * self.frame) as f64;
        let var = self.sigma * self.sigma;
        (o - img).square().sum().scale(-0.5 / var).add_scalar(-0.5 * n * (LN_2PI + var.ln()))
    }

    fn param_names(&self) -> Vec<String> {
        vec!["obs.patches".into()]
    }
}

/// Normalised cross-correlation of two equally sized arrays.
pub fn normalized_cross_correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

