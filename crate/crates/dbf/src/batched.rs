//! The block-diagonal recursion on the autodiff tape, vectorised over a
//! minibatch. Every latent pair `(2i, 2i+1)` is one 2×2 block; a belief is
//! five `B × n` tensors (two mean halves, three covariance entries) with
//! `n = d/2`, so a step costs O(B·d) and differentiates like any other op.

use dbf_base::gauss::PairMap;
use dbf_base::Error as BaseError;
use dbf_nn::{Tape, Tensor, Var};

use crate::error::Result;
use crate::recursion::VirtualPrior;

#[derive(Clone, Copy, Debug)]
pub struct BlockBelief<'t> {
    pub mx: Var<'t>,
    pub my: Var<'t>,
    pub sxx: Var<'t>,
    pub sxy: Var<'t>,
    pub syy: Var<'t>,
}

/// Entries of the per-pair 2×2 transition matrices, each `1 × n`.
#[derive(Clone, Copy, Debug)]
pub struct PairCoeffs<'t> {
    pub a11: Var<'t>,
    pub a12: Var<'t>,
    pub a21: Var<'t>,
    pub a22: Var<'t>,
}

impl<'t> PairCoeffs<'t> {
    /// `exp(ρ)·[[cos ω, −sin ω], [sin ω, cos ω]]` per block.
    pub fn rotation(rho: Var<'t>, omega: Var<'t>) -> Self {
        let mag = rho.exp();
        let c = mag * omega.cos();
        let s = mag * omega.sin();
        PairCoeffs {
            a11: c,
            a12: -s,
            a21: s,
            a22: c,
        }
    }

    pub fn constant(tape: &'t Tape, pairs: &[PairMap]) -> Self {
        let row = |f: fn(&PairMap) -> f64| tape.constant(Tensor::row(pairs.iter().map(f).collect()));
        PairCoeffs {
            a11: row(|p| p.a11),
            a12: row(|p| p.a12),
            a21: row(|p| p.a21),
            a22: row(|p| p.a22),
        }
    }
}

/// IOO output for one step split into pair halves: means and log-variances.
#[derive(Clone, Copy, Debug)]
pub struct BlockIoo<'t> {
    pub fx: Var<'t>,
    pub fy: Var<'t>,
    pub log_gx: Var<'t>,
    pub log_gy: Var<'t>,
}

/// Quantities of the prediction needed again by the KL term.
#[derive(Clone, Copy, Debug)]
pub struct PriorInfo<'t> {
    pub ixx: Var<'t>,
    pub ixy: Var<'t>,
    pub iyy: Var<'t>,
    pub log_det: Var<'t>,
}

/// Posterior plus the bookkeeping the ELBO needs.
#[derive(Clone, Copy, Debug)]
pub struct UpdateResult<'t> {
    pub post: BlockBelief<'t>,
    pub prior: PriorInfo<'t>,
    /// `ln det Σ_post` per block.
    pub post_log_det: Var<'t>,
}

/// `N(0, variance·I)` for a batch of `batch` sequences.
pub fn initial<'t>(tape: &'t Tape, batch: usize, n: usize, variance: f64) -> BlockBelief<'t> {
    BlockBelief {
        mx: tape.constant(Tensor::zeros(batch, n)),
        my: tape.constant(Tensor::zeros(batch, n)),
        sxx: tape.constant(Tensor::full(batch, n, variance)),
        sxy: tape.constant(Tensor::zeros(batch, n)),
        syy: tape.constant(Tensor::full(batch, n, variance)),
    }
}

/// `N(Mμ, MΣMᵀ + diag(q))` per block; `qx`, `qy` are `1 × n` variances.
pub fn predict<'t>(b: &BlockBelief<'t>, m: &PairCoeffs<'t>, qx: Var<'t>, qy: Var<'t>) -> BlockBelief<'t> {
    let (p, q, r, s) = (m.a11, m.a12, m.a21, m.a22);
    let mx = p * b.mx + q * b.my;
    let my = r * b.mx + s * b.my;
    let sxx = p.square() * b.sxx + (p * q).scale(2.0) * b.sxy + q.square() * b.syy + qx;
    let sxy = (p * r) * b.sxx + (p * s + q * r) * b.sxy + (q * s) * b.syy;
    let syy = r.square() * b.sxx + (r * s).scale(2.0) * b.sxy + s.square() * b.syy + qy;
    BlockBelief { mx, my, sxx, sxy, syy }
}

fn min_eig(xx: f64, xy: f64, yy: f64) -> f64 {
    let mean = 0.5 * (xx + yy);
    let rad = (0.25 * (xx - yy) * (xx - yy) + xy * xy).sqrt();
    mean - rad
}

/// Information-form update of every block:
/// `Λ = P⁻¹ + diag(G⁻¹ − V⁻¹)`, `μ = Λ⁻¹(P⁻¹μ_p + G⁻¹f − V⁻¹m)`.
/// Fails when any posterior precision block is not positive definite.
pub fn update<'t>(pred: &BlockBelief<'t>, ioo: &BlockIoo<'t>, vp: &VirtualPrior) -> Result<UpdateResult<'t>> {
    let tape = pred.mx.tape();
    let n = pred.mx.cols();
    let half = |k: usize| -> Vec<usize> { (0..n).map(|i| 2 * i + k).collect() };
    let vinv = |k: usize| tape.constant(Tensor::row(half(k).iter().map(|&i| 1.0 / vp.v_diag[i]).collect()));
    let vshift = |k: usize| tape.constant(Tensor::row(half(k).iter().map(|&i| vp.m[i] / vp.v_diag[i]).collect()));

    let det_p = pred.sxx * pred.syy - pred.sxy.square();
    let inv_det_p = det_p.recip();
    let ixx = pred.syy * inv_det_p;
    let ixy = -(pred.sxy * inv_det_p);
    let iyy = pred.sxx * inv_det_p;

    let gix = (-ioo.log_gx).exp();
    let giy = (-ioo.log_gy).exp();
    let lxx = ixx + gix - vinv(0);
    let lyy = iyy + giy - vinv(1);
    let det_l = lxx * lyy - ixy.square();

    {
        let (xx, xy, yy, dl, dp) = (lxx.value(), ixy.value(), lyy.value(), det_l.value(), det_p.value());
        for k in 0..dl.data.len() {
            if !(dp.data[k] > 0.0) {
                return Err(BaseError::NotPositiveDefinite { pivot: 2 * (k % n), value: dp.data[k] }.into());
            }
            if !(dl.data[k] > 0.0 && xx.data[k] > 0.0) {
                let min_eigenvalue = min_eig(xx.data[k], xy.data[k], yy.data[k]);
                return Err(BaseError::VirtualPriorDominates { min_eigenvalue }.into());
            }
        }
    }

    let eta_x = ixx * pred.mx + ixy * pred.my + gix * ioo.fx - vshift(0);
    let eta_y = ixy * pred.mx + iyy * pred.my + giy * ioo.fy - vshift(1);
    let inv_det_l = det_l.recip();
    let sxx = lyy * inv_det_l;
    let sxy = -(ixy * inv_det_l);
    let syy = lxx * inv_det_l;
    let mx = sxx * eta_x + sxy * eta_y;
    let my = sxy * eta_x + syy * eta_y;
    Ok(UpdateResult {
        post: BlockBelief { mx, my, sxx, sxy, syy },
        prior: PriorInfo {
            ixx,
            ixy,
            iyy,
            log_det: det_p.ln(),
        },
        post_log_det: -det_l.ln(),
    })
}

/// `KL(q ‖ p)` summed over blocks, one value per sequence (`B × 1`).
pub fn kl<'t>(q: &BlockBelief<'t>, p_mean: (Var<'t>, Var<'t>), p: &PriorInfo<'t>, q_log_det: Var<'t>) -> Var<'t> {
    let tr = p.ixx * q.sxx + (p.ixy * q.sxy).scale(2.0) + p.iyy * q.syy;
    let dx = p_mean.0 - q.mx;
    let dy = p_mean.1 - q.my;
    let maha = p.ixx * dx.square() + (p.ixy * dx * dy).scale(2.0) + p.iyy * dy.square();
    ((tr + maha + p.log_det - q_log_det).add_scalar(-2.0)).scale(0.5).sum_cols()
}

/// Reparametrised draw `h = μ + L·ε` per block with `L` the 2×2 Cholesky
/// factor; `ex`, `ey` are standard-normal constants of the same shape.
pub fn sample<'t>(b: &BlockBelief<'t>, ex: Var<'t>, ey: Var<'t>) -> (Var<'t>, Var<'t>) {
    let lxx = b.sxx.sqrt();
    let lyx = b.sxy / lxx;
    let lyy = (b.syy - b.sxy.square() / b.sxx).sqrt();
    (b.mx + lxx * ex, b.my + lyx * ex + lyy * ey)
}

/// Tiles every row `k` times (`[rows; rows; …]`), for multi-sample
/// expectations.
pub fn tile_rows<'t>(v: Var<'t>, k: usize) -> Var<'t> {
    if k == 1 {
        return v;
    }
    let r = v.rows();
    let idx: Vec<usize> = (0..k).flat_map(|_| 0..r).collect();
    v.gather_rows(&idx)
}

/// Column indices that split a `d`-wide matrix into its even (`x`) and odd
/// (`y`) halves.
pub fn pair_columns(d: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..d).step_by(2).collect(), (1..d).step_by(2).collect())
}

/// Inverse of [`pair_columns`]: `[x | y]` back to interleaved order.
pub fn interleave<'t>(x: Var<'t>, y: Var<'t>) -> Var<'t> {
    let n = x.cols();
    let both = dbf_nn::concat_cols(&[x, y]);
    let idx: Vec<usize> = (0..n).flat_map(|i| [i, n + i]).collect();
    both.gather_cols(&idx)
}

/// The belief of row `b` as a plain [`GaussianBelief`](dbf_base::GaussianBelief).
pub fn to_belief(b: &BlockBelief, row: usize) -> Result<dbf_base::GaussianBelief> {
    use dbf_base::gauss::SymBlock;
    let (mx, my, sxx, sxy, syy) = (b.mx.value(), b.my.value(), b.sxx.value(), b.sxy.value(), b.syy.value());
    let n = mx.cols;
    let mean = nalgebra::DVector::from_fn(2 * n, |i, _| if i % 2 == 0 { mx.get(row, i / 2) } else { my.get(row, i / 2) });
    let blocks = (0..n)
        .map(|i| SymBlock {
            xx: sxx.get(row, i),
            xy: sxy.get(row, i),
            yy: syy.get(row, i),
        })
        .collect();
    Ok(dbf_base::GaussianBelief::blocks(mean, blocks)?)
}
