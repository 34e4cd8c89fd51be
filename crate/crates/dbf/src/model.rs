//! The filter model: learned (or fixed) block dynamics, the inverse
//! observation operator `(f, G)` and an optional emission network `φ`.

use std::path::Path;

use dbf_base::envs::wrap_angle;
use dbf_base::gauss::PairMap;
use dbf_base::{BlockDynamics, DiagonalNoise, Error as BaseError, GaussianBelief};
use dbf_nn::{checkpoint, Bound, ConvSpec, LinearBlockSpec, Network, NetworkSpec, ParamId, ParamSet, Tape, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batched::{self, BlockIoo, PairCoeffs, UpdateResult};
use crate::error::{DbfError, Result};
use crate::recursion::{dbf_filter, FilterOutput, IooOutput, Transition, VirtualPrior, DEFAULT_VPRIOR_VARIANCE, INITIAL_VARIANCE};
use crate::vonmises::sample_vonmises;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmissionFamily {
    Gaussian,
    VonMises,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionSpec {
    pub decoder: NetworkSpec,
    pub families: Vec<EmissionFamily>,
    /// Initial ln σ of Gaussian dimensions (σ = 1 ⇒ R = I).
    #[serde(default)]
    pub log_sigma_init: f64,
    /// Initial ln κ of von Mises dimensions.
    #[serde(default = "default_log_kappa")]
    pub log_kappa_init: f64,
}

fn default_log_kappa() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DynamicsSpec {
    /// Trainable rotation-scaling blocks with fixed diagonal noise `e^{log_q}`.
    Learned { log_q: f64 },
    /// Known 2×2 blocks (e.g. constant velocity) with fixed noise variances.
    Fixed { pairs: Vec<PairMap>, noise: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbfConfig {
    pub latent_dim: usize,
    pub obs_dim: usize,
    /// Architecture of `f`; `G` is a separate network of the same shape.
    pub encoder: NetworkSpec,
    pub dynamics: DynamicsSpec,
    #[serde(default)]
    pub emission: Option<EmissionSpec>,
    #[serde(default = "default_vprior_variance")]
    pub vprior_variance: f64,
    #[serde(default = "default_init_variance")]
    pub init_variance: f64,
    /// Reparametrised samples per expectation.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_vprior_variance() -> f64 {
    DEFAULT_VPRIOR_VARIANCE
}

fn default_init_variance() -> f64 {
    INITIAL_VARIANCE
}

fn default_samples() -> usize {
    1
}

impl DbfConfig {
    /// Double pendulum: four positions in, `(θ₁, θ₂, ω₁, ω₂)` out with von
    /// Mises angles. `hidden`/`blocks` size the linear-block networks.
    pub fn pendulum(latent_dim: usize, hidden: usize, blocks: usize) -> Self {
        let enc = LinearBlockSpec { input: 4, hidden, output: latent_dim, blocks };
        let dec = LinearBlockSpec { input: latent_dim, hidden, output: 4, blocks };
        DbfConfig {
            latent_dim,
            obs_dim: 4,
            encoder: NetworkSpec::LinearBlock(enc),
            dynamics: DynamicsSpec::Learned { log_q: -6.0 },
            emission: Some(EmissionSpec {
                decoder: NetworkSpec::LinearBlock(dec),
                families: vec![
                    EmissionFamily::VonMises,
                    EmissionFamily::VonMises,
                    EmissionFamily::Gaussian,
                    EmissionFamily::Gaussian,
                ],
                log_sigma_init: 0.0,
                log_kappa_init: 5.0,
            }),
            vprior_variance: DEFAULT_VPRIOR_VARIANCE,
            init_variance: INITIAL_VARIANCE,
            samples: 1,
        }
    }

    /// Lorenz96 on `n_grid` points with circular-convolution networks.
    pub fn lorenz96(n_grid: usize, latent_dim: usize, channels: usize, conv_blocks: usize) -> Self {
        let spec = ConvSpec {
            length: n_grid,
            channels,
            kernel: 5,
            conv_blocks,
            latent: latent_dim,
        };
        DbfConfig {
            latent_dim,
            obs_dim: n_grid,
            encoder: NetworkSpec::ConvEncoder(spec.clone()),
            dynamics: DynamicsSpec::Learned { log_q: -8.0 },
            emission: Some(EmissionSpec {
                decoder: NetworkSpec::ConvDecoder(spec),
                families: vec![EmissionFamily::Gaussian; n_grid],
                log_sigma_init: 0.0,
                log_kappa_init: 5.0,
            }),
            vprior_variance: DEFAULT_VPRIOR_VARIANCE,
            init_variance: INITIAL_VARIANCE,
            samples: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.latent_dim;
        if d == 0 || d % 2 != 0 {
            return Err(DbfError::Config(format!("latent dimension must be even and > 0, got {d}")));
        }
        if self.samples == 0 {
            return Err(DbfError::Config("samples must be ≥ 1".into()));
        }
        if !(self.vprior_variance > 0.0) || !(self.init_variance > 0.0) {
            return Err(DbfError::Config("variances must be > 0".into()));
        }
        let (i, o) = net_dims(&self.encoder);
        if i != self.obs_dim || o != d {
            return Err(DbfError::Config(format!(
                "encoder maps {i} → {o}, expected {} → {d}",
                self.obs_dim
            )));
        }
        if let DynamicsSpec::Fixed { pairs, noise } = &self.dynamics {
            if 2 * pairs.len() != d || noise.len() != d {
                return Err(DbfError::Config("fixed dynamics do not match the latent dimension".into()));
            }
        }
        if let Some(e) = &self.emission {
            let (i, o) = net_dims(&e.decoder);
            if i != d || o != e.families.len() {
                return Err(DbfError::Config(format!(
                    "decoder maps {i} → {o}, expected {d} → {}",
                    e.families.len()
                )));
            }
        }
        Ok(())
    }
}

fn net_dims(spec: &NetworkSpec) -> (usize, usize) {
    match spec {
        NetworkSpec::LinearBlock(s) => (s.input, s.output),
        NetworkSpec::ConvEncoder(s) => (s.length, s.latent),
        NetworkSpec::ConvDecoder(s) => (s.latent, s.length),
    }
}

#[derive(Clone, Debug)]
struct Emission {
    net: Network,
    log_scale: ParamId,
}

/// Per-step outputs of the tape-side recursion for a minibatch.
#[derive(Clone, Copy, Debug)]
pub struct TapeStep<'t> {
    pub update: UpdateResult<'t>,
    /// Mean of the prediction the update started from.
    pub prior_mean: (Var<'t>, Var<'t>),
}

#[derive(Clone, Debug)]
pub struct DbfModel {
    pub config: DbfConfig,
    pub params: ParamSet,
    rho: Option<ParamId>,
    omega: Option<ParamId>,
    f_net: Network,
    g_net: Network,
    emission: Option<Emission>,
}

impl DbfModel {
    pub fn new<R: Rng + ?Sized>(config: DbfConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let (rho, omega) = match &config.dynamics {
            DynamicsSpec::Learned { .. } => {
                let init = BlockDynamics::random(config.latent_dim, rng)?;
                (
                    Some(params.add("dyn.rho", Tensor::row(init.rho().to_vec()))),
                    Some(params.add("dyn.omega", Tensor::row(init.omega().to_vec()))),
                )
            }
            DynamicsSpec::Fixed { .. } => (None, None),
        };
        let f_net = Network::new(&mut params, "f", &config.encoder, rng);
        let g_net = Network::new(&mut params, "g", &config.encoder, rng);
        let emission = config.emission.as_ref().map(|e| {
            let net = Network::new(&mut params, "phi", &e.decoder, rng);
            let init = e
                .families
                .iter()
                .map(|f| match f {
                    EmissionFamily::Gaussian => e.log_sigma_init,
                    EmissionFamily::VonMises => e.log_kappa_init,
                })
                .collect();
            let log_scale = params.add("emission.log_scale", Tensor::row(init));
            Emission { net, log_scale }
        });
        Ok(DbfModel {
            config,
            params,
            rho,
            omega,
            f_net,
            g_net,
            emission,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn has_emission(&self) -> bool {
        self.emission.is_some()
    }

    pub fn families(&self) -> &[EmissionFamily] {
        self.config.emission.as_ref().map(|e| e.families.as_slice()).unwrap_or(&[])
    }

    /// Parameters of `G` (frozen during the staged schedule).
    pub fn g_param_mask(&self) -> Vec<bool> {
        self.params.names().iter().map(|n| n.starts_with("g.")).collect()
    }

    pub fn vprior(&self) -> VirtualPrior {
        VirtualPrior {
            m: vec![0.0; self.latent_dim()],
            v_diag: vec![self.config.vprior_variance; self.latent_dim()],
        }
    }

    pub fn initial_belief(&self) -> Result<GaussianBelief> {
        Ok(GaussianBelief::isotropic(DVector::zeros(self.latent_dim()), self.config.init_variance)?)
    }

    /// Current learned dynamics (`None` for fixed dynamics).
    pub fn dynamics(&self) -> Option<BlockDynamics> {
        let (r, o) = (self.rho?, self.omega?);
        BlockDynamics::new(self.params.get(r).data.clone(), self.params.get(o).data.clone()).ok()
    }

    pub fn transition(&self) -> Result<Transition> {
        Ok(match &self.config.dynamics {
            DynamicsSpec::Learned { log_q } => Transition::Blocks {
                dynamics: self.dynamics().expect("learned dynamics are registered"),
                noise: DiagonalNoise::constant(self.latent_dim(), *log_q)?,
            },
            DynamicsSpec::Fixed { pairs, noise } => Transition::Pairs {
                pairs: pairs.clone(),
                noise: noise.clone(),
            },
        })
    }

    /// Emission scale parameters: σ for Gaussian dims, κ for von Mises dims.
    pub fn emission_scales(&self) -> Vec<f64> {
        match &self.emission {
            Some(e) => self.params.get(e.log_scale).data.iter().map(|v| v.exp()).collect(),
            None => Vec::new(),
        }
    }

    // ------------------------------------------------------------ tape side

    /// `(f(o), ln G(o))`, each `rows × d`.
    pub fn ioo_tape<'t>(&self, p: &Bound<'t>, o: Var<'t>) -> (Var<'t>, Var<'t>) {
        (self.f_net.forward(p, o), self.g_net.forward(p, o))
    }

    /// `φ(h)` for `rows × d` latent samples.
    pub fn decode_tape<'t>(&self, p: &Bound<'t>, h: Var<'t>) -> Var<'t> {
        self.emission.as_ref().expect("model has an emission network").net.forward(p, h)
    }

    pub fn log_scale_tape<'t>(&self, p: &Bound<'t>) -> Var<'t> {
        p[self.emission.as_ref().expect("model has an emission network").log_scale]
    }

    fn transition_tape<'t>(&self, p: &Bound<'t>, tape: &'t Tape) -> (PairCoeffs<'t>, Var<'t>, Var<'t>) {
        let n = self.latent_dim() / 2;
        match &self.config.dynamics {
            DynamicsSpec::Learned { log_q } => {
                let q = tape.constant(Tensor::full(1, n, log_q.exp()));
                let coeffs = PairCoeffs::rotation(p[self.rho.unwrap()], p[self.omega.unwrap()]);
                (coeffs, q, q)
            }
            DynamicsSpec::Fixed { pairs, noise } => {
                let qx = tape.constant(Tensor::row(noise.iter().step_by(2).copied().collect()));
                let qy = tape.constant(Tensor::row(noise.iter().skip(1).step_by(2).copied().collect()));
                (PairCoeffs::constant(tape, pairs), qx, qy)
            }
        }
    }

    /// Runs the recursion over `steps` time steps of a minibatch whose
    /// observations are stacked time-major (`row = t·batch + b`).
    pub fn filter_tape<'t>(&self, p: &Bound<'t>, tape: &'t Tape, obs: Var<'t>, batch: usize, steps: usize) -> Result<Vec<TapeStep<'t>>> {
        let d = self.latent_dim();
        let n = d / 2;
        if obs.rows() != batch * steps {
            return Err(BaseError::dims("stacked observation rows", batch * steps, obs.rows()).into());
        }
        let (f, lg) = self.ioo_tape(p, obs);
        let (even, odd) = batched::pair_columns(d);
        let (fx, fy) = (f.gather_cols(&even), f.gather_cols(&odd));
        let (gx, gy) = (lg.gather_cols(&even), lg.gather_cols(&odd));
        let (coeffs, qx, qy) = self.transition_tape(p, tape);
        let vp = self.vprior();
        let mut belief = batched::initial(tape, batch, n, self.config.init_variance);
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            if t > 0 {
                belief = batched::predict(&belief, &coeffs, qx, qy);
            }
            let rows = |v: Var<'t>| v.slice_rows(t * batch, batch);
            let ioo = BlockIoo {
                fx: rows(fx),
                fy: rows(fy),
                log_gx: rows(gx),
                log_gy: rows(gy),
            };
            let update = batched::update(&belief, &ioo, &vp)?;
            out.push(TapeStep {
                update,
                prior_mean: (belief.mx, belief.my),
            });
            belief = update.post;
        }
        Ok(out)
    }

    // ------------------------------------------------------------ inference

    fn forward_rows(&self, net: impl for<'t> Fn(&Bound<'t>, Var<'t>) -> Var<'t>, rows: &[DVector<f64>]) -> Vec<DVector<f64>> {
        if rows.is_empty() {
            return Vec::new();
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let width = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            data.extend(r.iter());
        }
        let y = net(&p, tape.constant(Tensor::new(rows.len(), width, data)));
        let v = y.value();
        (0..v.rows).map(|i| DVector::from_row_slice(v.row_slice(i))).collect()
    }

    /// IOO outputs for a sequence of observations.
    pub fn ioo_outputs(&self, obs: &[DVector<f64>]) -> Result<Vec<IooOutput>> {
        let f = self.forward_rows(|p, o| self.f_net.forward(p, o), obs);
        let lg = self.forward_rows(|p, o| self.g_net.forward(p, o), obs);
        f.into_iter()
            .zip(lg)
            .map(|(f, lg)| {
                let g: Vec<f64> = lg.iter().map(|v| v.exp()).collect();
                IooOutput::diagonal(f, &g)
            })
            .collect()
    }

    /// Filtered and predictive latent beliefs for one observation sequence.
    pub fn filter(&self, obs: &[DVector<f64>]) -> Result<FilterOutput> {
        let ioo = self.ioo_outputs(obs)?;
        dbf_filter(&self.initial_belief()?, &self.transition()?, &ioo, &self.vprior())
    }

    /// `φ(h)` with angle dimensions folded into (−π, π].
    pub fn decode(&self, h: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let fam = self.families().to_vec();
        self.forward_rows(|p, x| self.decode_tape(p, x), h)
            .into_iter()
            .map(|mut z| {
                for (j, f) in fam.iter().enumerate() {
                    if *f == EmissionFamily::VonMises {
                        z[j] = wrap_angle(z[j]);
                    }
                }
                z
            })
            .collect()
    }

    /// Point estimate of the physical state per step: `φ(μ_t)`.
    pub fn estimate(&self, obs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let out = self.filter(obs)?;
        let means: Vec<DVector<f64>> = out.filtered.iter().map(|b| b.mean().clone()).collect();
        Ok(self.decode(&means))
    }

    /// The same model without dynamics fusion: `φ(f(o_t))` per step.
    pub fn ioo_only_estimate(&self, obs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let f = self.forward_rows(|p, o| self.f_net.forward(p, o), obs);
        self.decode(&f)
    }

    /// Samples of the physical state: `h ~ belief`, then `z ~ p(z|h)`.
    /// Returns an `n × d_z` matrix.
    pub fn emission_sample<R: Rng + ?Sized>(&self, belief: &GaussianBelief, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(BaseError::InvalidArgument("emission_sample needs n ≥ 1".into()).into());
        }
        let fam = self.families().to_vec();
        if fam.is_empty() {
            return Err(DbfError::Config("model has no emission network".into()));
        }
        let h = belief.sample(n, rng)?;
        let rows: Vec<DVector<f64>> = (0..n).map(|i| h.row(i).transpose()).collect();
        let phi = self.forward_rows(|p, x| self.decode_tape(p, x), &rows);
        let scales = self.emission_scales();
        let mut out = DMatrix::zeros(n, fam.len());
        for (i, mean) in phi.iter().enumerate() {
            for (j, f) in fam.iter().enumerate() {
                out[(i, j)] = match f {
                    EmissionFamily::Gaussian => mean[j] + scales[j] * rng.sample::<f64, _>(StandardNormal),
                    EmissionFamily::VonMises => sample_vonmises(mean[j], scales[j], rng),
                };
            }
        }
        Ok(out)
    }

    // ------------------------------------------------------------ persistence

    pub fn save(&self, dir: &Path, stem: &str, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "block_layout": "dense -> layer-norm -> relu -> skip-add; last block plain dense",
            "extra": extra,
        });
        checkpoint::save(dir, stem, &self.params, meta)?;
        Ok(())
    }

    /// Rebuilds the architecture from the stored configuration and restores
    /// the weights. Returns the model and the caller's `extra` metadata.
    pub fn load(dir: &Path, stem: &str) -> Result<(Self, serde_json::Value)> {
        let (params, meta) = checkpoint::load(dir, stem)?;
        let config: DbfConfig = serde_json::from_value(meta["config"].clone())?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut model = DbfModel::new(config, &mut rng)?;
        // observation-model parameters are registered after construction
        for id in params.ids() {
            if params.name(id).starts_with("obs.") && model.params.find(params.name(id)).is_none() {
                model.params.add(params.name(id).to_string(), params.get(id).clone());
            }
        }
        checkpoint::restore_into(&mut model.params, &params)?;
        Ok((model, meta["extra"].clone()))
    }

    /// Restores parameter values from another model of the same architecture.
    pub fn set_params(&mut self, params: &ParamSet) -> Result<()> {
        checkpoint::restore_into(&mut self.params, params)?;
        Ok(())
    }

    /// Replaces `dyn.rho`/`dyn.omega` with the given values.
    pub fn set_dynamics(&mut self, dynamics: &BlockDynamics) -> Result<()> {
        let (r, o) = match (self.rho, self.omega) {
            (Some(r), Some(o)) => (r, o),
            _ => return Err(DbfError::Config("model has fixed dynamics".into())),
        };
        if dynamics.dim() != self.latent_dim() {
            return Err(BaseError::dims("dynamics dimension", self.latent_dim(), dynamics.dim()).into());
        }
        *self.params.get_mut(r) = Tensor::row(dynamics.rho().to_vec());
        *self.params.get_mut(o) = Tensor::row(dynamics.omega().to_vec());
        Ok(())
    }
}

/// Means of a belief sequence.
pub fn belief_means(beliefs: &[GaussianBelief]) -> Vec<DVector<f64>> {
    beliefs.iter().map(|b| b.mean().clone()).collect()
}
