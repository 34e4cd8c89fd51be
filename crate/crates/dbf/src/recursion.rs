//! The analytic filter recursion: linear-Gaussian predict, then an
//! information-form update that adds the inverse observation operator's
//! precision and removes the virtual prior's.

use dbf_base::gauss::{PairMap, SymMatrix};
use dbf_base::{BlockDynamics, DiagonalNoise, Error as BaseError, GaussianBelief, InfoTerm, LinearGaussianMap};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DbfError, Result};

/// Variance of the default virtual prior.
pub const DEFAULT_VPRIOR_VARIANCE: f64 = 1e8;
/// Variance of the initial belief `q(z₁)`.
pub const INITIAL_VARIANCE: f64 = 100.0;

/// The Gaussian `N(m, diag(v))` the IOO is assumed to have been fitted under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualPrior {
    pub m: Vec<f64>,
    pub v_diag: Vec<f64>,
}

impl VirtualPrior {
    pub fn new(m: Vec<f64>, v_diag: Vec<f64>) -> Result<Self> {
        if m.len() != v_diag.len() {
            return Err(BaseError::dims("virtual prior variance", m.len(), v_diag.len()).into());
        }
        if v_diag.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(DbfError::Config("virtual prior variances must be finite and > 0".into()));
        }
        Ok(VirtualPrior { m, v_diag })
    }

    /// `m = 0`, `V = 1e8·I`.
    pub fn standard(dim: usize) -> Self {
        VirtualPrior {
            m: vec![0.0; dim],
            v_diag: vec![DEFAULT_VPRIOR_VARIANCE; dim],
        }
    }

    /// `V → ∞`: contributes nothing.
    pub fn flat(dim: usize) -> Self {
        VirtualPrior {
            m: vec![0.0; dim],
            v_diag: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// The subtracted term: precision `−V⁻¹`, shift `−V⁻¹m`.
    fn negative_term(&self) -> InfoTerm {
        let prec: Vec<f64> = self.v_diag.iter().map(|v| -1.0 / v).collect();
        let shift = DVector::from_iterator(self.dim(), prec.iter().zip(&self.m).map(|(p, m)| p * m));
        InfoTerm {
            precision: SymMatrix::diagonal(&prec),
            shift,
        }
    }
}

/// Gaussian output `N(f, G)` of the inverse observation operator for one
/// observation. Networks produce diagonal `G`; the analytic linear operator
/// may be dense.
#[derive(Clone, Debug, PartialEq)]
pub struct IooOutput {
    pub f: DVector<f64>,
    pub g: SymMatrix,
}

impl IooOutput {
    pub fn diagonal(f: DVector<f64>, g_diag: &[f64]) -> Result<Self> {
        if f.len() != g_diag.len() {
            return Err(BaseError::dims("IOO variance", f.len(), g_diag.len()).into());
        }
        if g_diag.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(DbfError::Base(BaseError::InvalidArgument(
                "IOO variances must be finite and > 0".into(),
            )));
        }
        Ok(IooOutput {
            f,
            g: SymMatrix::diagonal(g_diag),
        })
    }

    pub fn dense(f: DVector<f64>, g: DMatrix<f64>) -> Result<Self> {
        // validates shape and positive definiteness
        let belief = GaussianBelief::dense(f, g)?;
        Ok(IooOutput {
            f: belief.mean().clone(),
            g: belief.cov().clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    /// The IOO with zero precision, used where an observation should be
    /// ignored.
    pub fn uninformative(dim: usize) -> Self {
        IooOutput {
            f: DVector::zeros(dim),
            g: SymMatrix::diagonal(&vec![f64::INFINITY; dim]),
        }
    }

    fn term(&self) -> Result<InfoTerm> {
        match &self.g {
            SymMatrix::Blocks(blocks) if blocks.iter().all(|b| b.xy == 0.0) => {
                let prec: Vec<f64> = blocks.iter().flat_map(|b| [1.0 / b.xx, 1.0 / b.yy]).collect();
                let shift = DVector::from_iterator(self.dim(), prec.iter().zip(self.f.iter()).map(|(p, f)| p * f));
                Ok(InfoTerm {
                    precision: SymMatrix::diagonal(&prec),
                    shift,
                })
            }
            _ => Ok(InfoTerm::from_belief(&GaussianBelief::new(self.f.clone(), self.g.clone())?)?),
        }
    }
}

/// `N(0, 100·I)` in block storage.
pub fn initial_belief(dim: usize) -> Result<GaussianBelief> {
    Ok(GaussianBelief::isotropic(DVector::zeros(dim), INITIAL_VARIANCE)?)
}

/// The latent transition used by the predict step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Transition {
    /// Rotation-scaling blocks with diagonal noise (the learned dynamics).
    Blocks { dynamics: BlockDynamics, noise: DiagonalNoise },
    /// Arbitrary 2×2 blocks with diagonal noise variances.
    Pairs { pairs: Vec<PairMap>, noise: Vec<f64> },
    /// Any linear-Gaussian map.
    Dense { map: LinearGaussianMap },
}

impl Transition {
    pub fn dim(&self) -> usize {
        match self {
            Transition::Blocks { dynamics, .. } => dynamics.dim(),
            Transition::Pairs { pairs, .. } => 2 * pairs.len(),
            Transition::Dense { map } => map.out_dim(),
        }
    }

    /// Predict step. Block storage is preserved for the block variants.
    pub fn predict(&self, belief: &GaussianBelief) -> Result<GaussianBelief> {
        match self {
            Transition::Blocks { dynamics, noise } => dbf_predict(belief, dynamics, noise),
            Transition::Pairs { pairs, noise } => {
                if belief.is_block() {
                    Ok(belief.push_pairs(pairs, noise)?)
                } else {
                    let mut a = DMatrix::zeros(self.dim(), self.dim());
                    for (i, p) in pairs.iter().enumerate() {
                        a[(2 * i, 2 * i)] = p.a11;
                        a[(2 * i, 2 * i + 1)] = p.a12;
                        a[(2 * i + 1, 2 * i)] = p.a21;
                        a[(2 * i + 1, 2 * i + 1)] = p.a22;
                    }
                    let q = DMatrix::from_diagonal(&DVector::from_column_slice(noise));
                    Ok(belief.pushforward(&LinearGaussianMap { matrix: a, noise_cov: q })?)
                }
            }
            Transition::Dense { map } => Ok(belief.pushforward(map)?),
        }
    }
}

/// Predict through the block dynamics: `N(Aμ, AΣAᵀ + Q)`.
pub fn dbf_predict(belief: &GaussianBelief, dynamics: &BlockDynamics, noise: &DiagonalNoise) -> Result<GaussianBelief> {
    if belief.is_block() {
        Ok(dynamics.push_belief(belief, noise)?)
    } else {
        Ok(belief.pushforward(&dynamics.to_map(noise)?)?)
    }
}

/// Update a prediction with one IOO output:
/// `Σ⁻¹ = Σ_pred⁻¹ + G⁻¹ − V⁻¹`, `μ = Σ(Σ_pred⁻¹μ_pred + G⁻¹f − V⁻¹m)`.
pub fn dbf_update(pred: &GaussianBelief, ioo: &IooOutput, vp: &VirtualPrior) -> Result<GaussianBelief> {
    let d = pred.dim();
    if ioo.dim() != d {
        return Err(BaseError::dims("IOO output", d, ioo.dim()).into());
    }
    if vp.dim() != d {
        return Err(BaseError::dims("virtual prior", d, vp.dim()).into());
    }
    let terms = [InfoTerm::from_belief(pred)?, ioo.term()?, vp.negative_term()];
    match dbf_base::info_combine(&terms) {
        Ok(b) => Ok(b),
        Err(BaseError::PosteriorPrecisionNotPd { .. }) => {
            let total = terms
                .iter()
                .map(|t| t.precision.to_dense())
                .fold(DMatrix::zeros(d, d), |acc, m| acc + m);
            let min_eigenvalue = total.symmetric_eigen().eigenvalues.min();
            Err(BaseError::VirtualPriorDominates { min_eigenvalue }.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// Filtered beliefs `q(z_t|o_{1:t})` and the one-step predictions
/// `q(z_t|o_{1:t−1})` they were updated from (`predictive[0]` is the initial
/// belief).
#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutput {
    pub filtered: Vec<GaussianBelief>,
    pub predictive: Vec<GaussianBelief>,
}

/// Runs the recursion over a sequence of IOO outputs. The first observation
/// updates `init` directly.
pub fn dbf_filter(init: &GaussianBelief, transition: &Transition, ioo: &[IooOutput], vp: &VirtualPrior) -> Result<FilterOutput> {
    if ioo.is_empty() {
        return Err(BaseError::InvalidArgument("dbf_filter needs at least one observation".into()).into());
    }
    let mut filtered = Vec::with_capacity(ioo.len());
    let mut predictive = Vec::with_capacity(ioo.len());
    let mut prior = init.clone();
    for (t, out) in ioo.iter().enumerate() {
        if t > 0 {
            prior = transition.predict(filtered.last().expect("filtered is non-empty after t=0"))?;
        }
        let post = dbf_update(&prior, out, vp)?;
        predictive.push(prior.clone());
        filtered.push(post);
    }
    Ok(FilterOutput { filtered, predictive })
}

/// The linear IOO that makes the recursion coincide with the Kalman filter
/// for `o = Hz + ε`, `ε ~ N(0, R)`, with invertible `H`:
/// `G⁻¹ = HᵀR⁻¹H + V⁻¹`, `f = G(HᵀR⁻¹o + V⁻¹m)`.
pub fn linear_ioo(h: &DMatrix<f64>, r: &DMatrix<f64>, o: &DVector<f64>, vp: &VirtualPrior) -> Result<IooOutput> {
    let r_inv = dbf_base::linalg::spd_inverse(r)?;
    let ht_rinv = h.transpose() * &r_inv;
    let mut prec = &ht_rinv * h;
    let mut shift = &ht_rinv * o;
    for i in 0..vp.dim() {
        prec[(i, i)] += 1.0 / vp.v_diag[i];
        shift[i] += vp.m[i] / vp.v_diag[i];
    }
    let g = dbf_base::linalg::spd_inverse(&prec)?;
    let f = &g * shift;
    IooOutput::dense(f, dbf_base::linalg::symmetrize(&g))
}
