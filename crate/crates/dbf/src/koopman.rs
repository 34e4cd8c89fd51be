//! Pretraining of a linear latent model on state trajectories alone: an
//! encoder into the latent, block dynamics there and a decoder back, fitted
//! by multi-step prediction plus latent consistency.

use dbf_base::envs::trajectory::substream;
use dbf_base::{BlockDynamics, Error as BaseError};
use dbf_nn::{Adam, Bound, Network, NetworkSpec, ParamId, ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batched::{interleave, pair_columns, PairCoeffs};
use crate::error::{DbfError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KoopmanOptions {
    pub latent_dim: usize,
    /// Longest prediction horizon `K`.
    pub horizon: usize,
    pub lr: f64,
    pub steps: usize,
    /// Windows per minibatch.
    pub batch: usize,
    pub seed: u64,
    /// `None` keeps encoder and decoder fixed at the identity (requires the
    /// latent and state dimensions to agree).
    pub encoder: Option<NetworkSpec>,
    pub decoder: Option<NetworkSpec>,
}

impl KoopmanOptions {
    pub fn identity(latent_dim: usize, horizon: usize, steps: usize, seed: u64) -> Self {
        KoopmanOptions {
            latent_dim,
            horizon,
            lr: 1e-2,
            steps,
            batch: 32,
            seed,
            encoder: None,
            decoder: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KoopmanResult {
    pub dynamics: BlockDynamics,
    /// Encoder/decoder weights (`enc.*`, `dec.*`) plus `dyn.rho`, `dyn.omega`.
    pub params: ParamSet,
    pub encoder: Option<Network>,
    pub decoder: Option<Network>,
    pub losses: Vec<f64>,
}

impl KoopmanResult {
    /// Encodes states (rows) into the latent.
    pub fn encode(&self, z: &Tensor) -> Tensor {
        match &self.encoder {
            None => z.clone(),
            Some(net) => {
                let tape = Tape::new();
                let p = self.params.bind(&tape);
                let out = net.forward(&p, tape.constant(z.clone()));
                let v = out.value().clone();
                v
            }
        }
    }
}

/// `A^k h` for a latent batch in interleaved order.
fn apply_blocks<'t>(coeffs: &PairCoeffs<'t>, h: Var<'t>) -> Var<'t> {
    let (even, odd) = pair_columns(h.cols());
    let (x, y) = (h.gather_cols(&even), h.gather_cols(&odd));
    let nx = coeffs.a11 * x + coeffs.a12 * y;
    let ny = coeffs.a21 * x + coeffs.a22 * y;
    interleave(nx, ny)
}

struct Parts {
    rho: ParamId,
    omega: ParamId,
    encoder: Option<Network>,
    decoder: Option<Network>,
}

fn loss<'t>(parts: &Parts, p: &Bound<'t>, windows: &[Tensor]) -> Var<'t> {
    let tape = p[parts.rho].tape();
    let coeffs = PairCoeffs::rotation(p[parts.rho], p[parts.omega]);
    let enc = |z: Var<'t>| match &parts.encoder {
        Some(n) => n.forward(p, z),
        None => z,
    };
    let dec = |h: Var<'t>| match &parts.decoder {
        Some(n) => n.forward(p, h),
        None => h,
    };
    let z0 = tape.constant(windows[0].clone());
    let mut h = enc(z0);
    let mut total: Option<Var<'t>> = None;
    let rows = windows[0].rows as f64;
    for w in &windows[1..] {
        h = apply_blocks(&coeffs, h);
        let zk = tape.constant(w.clone());
        let pred = (dec(h) - zk).square().sum();
        let term = if parts.encoder.is_some() {
            pred + (enc(zk) - h).square().sum()
        } else {
            pred
        };
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    total.expect("horizon ≥ 1").scale(1.0 / rows)
}

/// Fits `(encoder, dynamics, decoder)` to windows of `states`, given as
/// trajectories of `T × d_z` rows.
pub fn koopman_pretrain(states: &[Vec<Vec<f64>>], opts: &KoopmanOptions) -> Result<KoopmanResult> {
    let d = opts.latent_dim;
    if d == 0 || d % 2 != 0 {
        return Err(BaseError::OddDimension(d).into());
    }
    if opts.horizon == 0 || opts.batch == 0 {
        return Err(DbfError::Config("horizon and batch must be ≥ 1".into()));
    }
    let usable: Vec<usize> = (0..states.len()).filter(|&i| states[i].len() > opts.horizon).collect();
    if usable.is_empty() {
        return Err(DbfError::Config("no trajectory is longer than the horizon".into()));
    }
    let dz = states[usable[0]][0].len();
    if opts.encoder.is_none() != opts.decoder.is_none() {
        return Err(DbfError::Config("encoder and decoder are both learned or both identity".into()));
    }
    if opts.encoder.is_none() && dz != d {
        return Err(BaseError::dims("identity encoder latent", dz, d).into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let init = BlockDynamics::random(d, &mut rng)?;
    let mut params = ParamSet::new();
    let rho = params.add("dyn.rho", Tensor::row(init.rho().to_vec()));
    let omega = params.add("dyn.omega", Tensor::row(init.omega().to_vec()));
    let encoder = opts.encoder.as_ref().map(|s| Network::new(&mut params, "enc", s, &mut rng));
    let decoder = opts.decoder.as_ref().map(|s| Network::new(&mut params, "dec", s, &mut rng));
    let parts = Parts {
        rho,
        omega,
        encoder,
        decoder,
    };
    let mut adam = Adam::new(opts.lr, &params);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut srng = substream(opts.seed, step, 0);
        let picks: Vec<(usize, usize)> = (0..opts.batch)
            .map(|_| {
                let i = usable[srng.gen_range(0..usable.len())];
                let t = srng.gen_range(0..states[i].len() - opts.horizon);
                (i, t)
            })
            .collect();
        let windows: Vec<Tensor> = (0..=opts.horizon)
            .map(|k| {
                let data = picks.iter().flat_map(|&(i, t)| states[i][t + k].iter().copied()).collect();
                Tensor::new(opts.batch, dz, data)
            })
            .collect();
        let tape = Tape::new();
        let p = params.bind(&tape);
        let l = loss(&parts, &p, &windows);
        let value = l.item();
        if !value.is_finite() {
            return Err(DbfError::Divergence {
                step,
                reason: format!("non-finite pretraining loss {value}"),
            });
        }
        let grads = p.gradients(&tape.backward(l));
        drop(p);
        adam.update(&mut params, &grads, None)?;
        losses.push(value);
    }
    let dynamics = BlockDynamics::new(params.get(rho).data.clone(), params.get(omega).data.clone())?;
    Ok(KoopmanResult {
        dynamics,
        params,
        encoder: parts.encoder,
        decoder: parts.decoder,
        losses,
    })
}
