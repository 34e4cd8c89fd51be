//! Exact Gaussian algebra on dense or 2×2-block-diagonal covariances.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Symmetric 2×2 block `[[xx, xy], [xy, yy]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymBlock {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl SymBlock {
    pub const ZERO: SymBlock = SymBlock {
        xx: 0.0,
        xy: 0.0,
        yy: 0.0,
    };

    pub fn diag(a: f64, b: f64) -> Self {
        SymBlock {
            xx: a,
            xy: 0.0,
            yy: b,
        }
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn add(&self, o: &SymBlock) -> SymBlock {
        SymBlock {
            xx: self.xx + o.xx,
            xy: self.xy + o.xy,
            yy: self.yy + o.yy,
        }
    }

    /// Lower Cholesky factor `(l11, l21, l22)`; `pivot_base` names the failing
    /// row in errors.
    pub fn chol(&self, pivot_base: usize) -> Result<(f64, f64, f64)> {
        if !(self.xx > 0.0) || !self.xx.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: pivot_base,
                value: self.xx,
            });
        }
        let l11 = self.xx.sqrt();
        let l21 = self.xy / l11;
        let rest = self.yy - l21 * l21;
        if !(rest > 0.0) || !rest.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: pivot_base + 1,
                value: rest,
            });
        }
        Ok((l11, l21, rest.sqrt()))
    }

    /// Closed-form inverse; fails unless the block is positive definite.
    pub fn inverse(&self, pivot_base: usize) -> Result<SymBlock> {
        self.chol(pivot_base)?;
        let det = self.det();
        Ok(SymBlock {
            xx: self.yy / det,
            xy: -self.xy / det,
            yy: self.xx / det,
        })
    }

    pub fn mul_vec(&self, v: (f64, f64)) -> (f64, f64) {
        (
            self.xx * v.0 + self.xy * v.1,
            self.xy * v.0 + self.yy * v.1,
        )
    }
}

/// General 2×2 block `[[a11, a12], [a21, a22]]` acting on one coordinate pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMap {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
}

impl PairMap {
    pub fn apply(&self, v: (f64, f64)) -> (f64, f64) {
        (
            self.a11 * v.0 + self.a12 * v.1,
            self.a21 * v.0 + self.a22 * v.1,
        )
    }

    /// M·S·Mᵀ for symmetric S.
    pub fn congruence(&self, s: &SymBlock) -> SymBlock {
        let (p, q, r, t) = (self.a11, self.a12, self.a21, self.a22);
        SymBlock {
            xx: p * p * s.xx + 2.0 * p * q * s.xy + q * q * s.yy,
            xy: p * r * s.xx + (p * t + q * r) * s.xy + q * t * s.yy,
            yy: r * r * s.xx + 2.0 * r * t * s.xy + t * t * s.yy,
        }
    }
}

/// A symmetric matrix stored densely or as independent 2×2 diagonal blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SymMatrix {
    Dense(DMatrix<f64>),
    Blocks(Vec<SymBlock>),
}

impl SymMatrix {
    /// Diagonal matrix, in block storage when the dimension is even.
    pub fn diagonal(values: &[f64]) -> SymMatrix {
        if values.len() % 2 == 0 {
            SymMatrix::Blocks(
                values
                    .chunks(2)
                    .map(|c| SymBlock::diag(c[0], c[1]))
                    .collect(),
            )
        } else {
            SymMatrix::Dense(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SymMatrix::Dense(m) => m.nrows(),
            SymMatrix::Blocks(b) => 2 * b.len(),
        }
    }

    pub fn is_blocks(&self) -> bool {
        matches!(self, SymMatrix::Blocks(_))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SymMatrix::Dense(m) => m.clone(),
            SymMatrix::Blocks(blocks) => {
                let n = 2 * blocks.len();
                let mut m = DMatrix::zeros(n, n);
                for (i, b) in blocks.iter().enumerate() {
                    m[(2 * i, 2 * i)] = b.xx;
                    m[(2 * i, 2 * i + 1)] = b.xy;
                    m[(2 * i + 1, 2 * i)] = b.xy;
                    m[(2 * i + 1, 2 * i + 1)] = b.yy;
                }
                m
            }
        }
    }

    /// Converts a dense matrix to block storage if every entry outside the
    /// 2×2 diagonal blocks is exactly zero.
    pub fn try_blocks(m: &DMatrix<f64>) -> Option<Vec<SymBlock>> {
        let n = m.nrows();
        if n % 2 != 0 || !is_pair_block_diagonal(m) {
            return None;
        }
        Some(
            (0..n / 2)
                .map(|i| SymBlock {
                    xx: m[(2 * i, 2 * i)],
                    xy: 0.5 * (m[(2 * i, 2 * i + 1)] + m[(2 * i + 1, 2 * i)]),
                    yy: m[(2 * i + 1, 2 * i + 1)],
                })
                .collect(),
        )
    }

    pub fn scale(&self, k: f64) -> SymMatrix {
        match self {
            SymMatrix::Dense(m) => SymMatrix::Dense(m * k),
            SymMatrix::Blocks(b) => SymMatrix::Blocks(
                b.iter()
                    .map(|s| SymBlock {
                        xx: s.xx * k,
                        xy: s.xy * k,
                        yy: s.yy * k,
                    })
                    .collect(),
            ),
        }
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        check_dim("matrix sum", self.dim(), other.dim())?;
        Ok(match (self, other) {
            (SymMatrix::Blocks(a), SymMatrix::Blocks(b)) => {
                SymMatrix::Blocks(a.iter().zip(b).map(|(x, y)| x.add(y)).collect())
            }
            _ => SymMatrix::Dense(self.to_dense() + other.to_dense()),
        })
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SymMatrix::Dense(m) => m * v,
            SymMatrix::Blocks(blocks) => {
                let mut out = DVector::zeros(v.len());
                for (i, b) in blocks.iter().enumerate() {
                    let (x, y) = b.mul_vec((v[2 * i], v[2 * i + 1]));
                    out[2 * i] = x;
                    out[2 * i + 1] = y;
                }
                out
            }
        }
    }
}

/// True if all entries outside the 2×2 diagonal blocks are exactly zero.
pub fn is_pair_block_diagonal(m: &DMatrix<f64>) -> bool {
    if m.nrows() % 2 != 0 || !m.is_square() {
        return false;
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i / 2 != j / 2 && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

/// A linear map with additive Gaussian noise: `z ↦ M z + ε`, `ε ~ N(0, noise_cov)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianMap {
    pub matrix: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
}

impl LinearGaussianMap {
    /// Validates the noise covariance. A zero matrix is accepted as the
    /// noiseless limit; otherwise it must be symmetric positive definite.
    pub fn new(matrix: DMatrix<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        check_dim("noise covariance rows", matrix.nrows(), noise_cov.nrows())?;
        check_dim("noise covariance cols", matrix.nrows(), noise_cov.ncols())?;
        if noise_cov.iter().any(|v| *v != 0.0) {
            linalg::chol(&noise_cov)?;
        }
        Ok(LinearGaussianMap { matrix, noise_cov })
    }

    pub fn noiseless(matrix: DMatrix<f64>) -> Self {
        let n = matrix.nrows();
        LinearGaussianMap {
            matrix,
            noise_cov: DMatrix::zeros(n, n),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Composition `other ∘ self`.
    pub fn then(&self, other: &LinearGaussianMap) -> LinearGaussianMap {
        LinearGaussianMap {
            matrix: &other.matrix * &self.matrix,
            noise_cov: linalg::symmetrize(
                &(&other.matrix * &self.noise_cov * other.matrix.transpose() + &other.noise_cov),
            ),
        }
    }
}

/// A Gaussian belief `N(mean, cov)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: SymMatrix,
}

/// One additive term of an information-form combination: a precision matrix
/// and the matching precision-weighted mean.
#[derive(Clone, Debug)]
pub struct InfoTerm {
    pub precision: SymMatrix,
    pub shift: DVector<f64>,
}

impl InfoTerm {
    /// The information term of `N(mean, cov)`.
    pub fn from_belief(g: &GaussianBelief) -> Result<InfoTerm> {
        let precision = g.precision()?;
        let shift = precision.mul_vec(&g.mean);
        Ok(InfoTerm { precision, shift })
    }
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: SymMatrix) -> Result<Self> {
        check_dim("covariance", mean.len(), cov.dim())?;
        match &cov {
            SymMatrix::Dense(m) => {
                linalg::chol(m)?;
            }
            SymMatrix::Blocks(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    b.chol(2 * i)?;
                }
            }
        }
        Ok(GaussianBelief { mean, cov })
    }

    pub fn dense(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(mean, SymMatrix::Dense(cov))
    }

    pub fn blocks(mean: DVector<f64>, blocks: Vec<SymBlock>) -> Result<Self> {
        if mean.len() % 2 != 0 {
            return Err(Error::OddDimension(mean.len()));
        }
        Self::new(mean, SymMatrix::Blocks(blocks))
    }

    /// `N(mean, variance·I)` in block storage when the dimension is even.
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let cov = SymMatrix::diagonal(&vec![variance; mean.len()]);
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &SymMatrix {
        &self.cov
    }

    pub fn dense_cov(&self) -> DMatrix<f64> {
        self.cov.to_dense()
    }

    pub fn is_block(&self) -> bool {
        self.cov.is_blocks()
    }

    pub fn to_dense(&self) -> GaussianBelief {
        GaussianBelief {
            mean: self.mean.clone(),
            cov: SymMatrix::Dense(self.cov.to_dense()),
        }
    }

    /// Block storage copy; fails if the covariance couples different pairs.
    pub fn to_blocks(&self) -> Result<GaussianBelief> {
        match &self.cov {
            SymMatrix::Blocks(_) => Ok(self.clone()),
            SymMatrix::Dense(m) => {
                if m.nrows() % 2 != 0 {
                    return Err(Error::OddDimension(m.nrows()));
                }
                let blocks = SymMatrix::try_blocks(m).ok_or_else(|| {
                    Error::InvalidArgument("covariance is not 2×2-block-diagonal".into())
                })?;
                Ok(GaussianBelief {
                    mean: self.mean.clone(),
                    cov: SymMatrix::Blocks(blocks),
                })
            }
        }
    }

    pub fn variances(&self) -> DVector<f64> {
        match &self.cov {
            SymMatrix::Dense(m) => m.diagonal(),
            SymMatrix::Blocks(b) => {
                DVector::from_iterator(2 * b.len(), b.iter().flat_map(|s| [s.xx, s.yy]))
            }
        }
    }

    pub fn precision(&self) -> Result<SymMatrix> {
        Ok(match &self.cov {
            SymMatrix::Dense(m) => SymMatrix::Dense(linalg::spd_inverse(m)?),
            SymMatrix::Blocks(b) => SymMatrix::Blocks(
                b.iter()
                    .enumerate()
                    .map(|(i, s)| s.inverse(2 * i))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    pub fn log_det_cov(&self) -> Result<f64> {
        Ok(match &self.cov {
            SymMatrix::Dense(m) => linalg::chol_logdet(&linalg::chol(m)?),
            SymMatrix::Blocks(b) => {
                let mut s = 0.0;
                for (i, blk) in b.iter().enumerate() {
                    blk.chol(2 * i)?;
                    s += blk.det().ln();
                }
                s
            }
        })
    }

    /// Draws `n` samples as the rows of an `n × d` matrix.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be ≥ 1".into()));
        }
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        match &self.cov {
            SymMatrix::Dense(m) => {
                let l = linalg::chol(m)?;
                for r in 0..n {
                    let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let z = &self.mean + &l * eps;
                    out.set_row(r, &z.transpose());
                }
            }
            SymMatrix::Blocks(blocks) => {
                let factors = blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b.chol(2 * i))
                    .collect::<Result<Vec<_>>>()?;
                for r in 0..n {
                    for (i, (l11, l21, l22)) in factors.iter().enumerate() {
                        let e1: f64 = rng.sample(StandardNormal);
                        let e2: f64 = rng.sample(StandardNormal);
                        out[(r, 2 * i)] = self.mean[2 * i] + l11 * e1;
                        out[(r, 2 * i + 1)] = self.mean[2 * i + 1] + l21 * e1 + l22 * e2;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Distribution of `M z + ε`. Block storage is kept when M is
    /// 2×2-block-diagonal and the noise is diagonal.
    pub fn pushforward(&self, map: &LinearGaussianMap) -> Result<GaussianBelief> {
        check_dim("map input", map.in_dim(), self.dim())?;
        let mean = &map.matrix * &self.mean;
        if let SymMatrix::Blocks(blocks) = &self.cov {
            if map.matrix.is_square()
                && is_pair_block_diagonal(&map.matrix)
                && is_diagonal(&map.noise_cov)
            {
                let pairs: Vec<PairMap> = (0..blocks.len())
                    .map(|i| PairMap {
                        a11: map.matrix[(2 * i, 2 * i)],
                        a12: map.matrix[(2 * i, 2 * i + 1)],
                        a21: map.matrix[(2 * i + 1, 2 * i)],
                        a22: map.matrix[(2 * i + 1, 2 * i + 1)],
                    })
                    .collect();
                let noise: Vec<f64> = map.noise_cov.diagonal().iter().copied().collect();
                return self.push_pairs(&pairs, &noise);
            }
        }
        let cov = &map.matrix * self.cov.to_dense() * map.matrix.transpose() + &map.noise_cov;
        Ok(GaussianBelief {
            mean,
            cov: SymMatrix::Dense(linalg::symmetrize(&cov)),
        })
    }

    /// Block-storage pushforward through per-pair maps plus diagonal noise;
    /// O(d) arithmetic.
    pub fn push_pairs(&self, pairs: &[PairMap], noise_diag: &[f64]) -> Result<GaussianBelief> {
        let blocks = match &self.cov {
            SymMatrix::Blocks(b) => b,
            SymMatrix::Dense(_) => {
                return Err(Error::InvalidArgument(
                    "pairwise pushforward needs block storage".into(),
                ))
            }
        };
        check_dim("pair maps", blocks.len(), pairs.len())?;
        check_dim("noise diagonal", self.dim(), noise_diag.len())?;
        let mut mean = DVector::zeros(self.dim());
        let mut out = Vec::with_capacity(blocks.len());
        for (i, (p, s)) in pairs.iter().zip(blocks).enumerate() {
            let (x, y) = p.apply((self.mean[2 * i], self.mean[2 * i + 1]));
            mean[2 * i] = x;
            mean[2 * i + 1] = y;
            let mut c = p.congruence(s);
            c.xx += noise_diag[2 * i];
            c.yy += noise_diag[2 * i + 1];
            out.push(c);
        }
        Ok(GaussianBelief {
            mean,
            cov: SymMatrix::Blocks(out),
        })
    }
}

/// KL(q ‖ p) in closed form.
pub fn gauss_kl(q: &GaussianBelief, p: &GaussianBelief) -> Result<f64> {
    check_dim("KL arguments", q.dim(), p.dim())?;
    let kl = match (&q.cov, &p.cov) {
        (SymMatrix::Blocks(qb), SymMatrix::Blocks(pb)) => {
            let mut total = 0.0;
            for (i, (sq, sp)) in qb.iter().zip(pb).enumerate() {
                let pinv = sp.inverse(2 * i)?;
                sq.chol(2 * i)?;
                let tr = pinv.xx * sq.xx + 2.0 * pinv.xy * sq.xy + pinv.yy * sq.yy;
                let dm = (p.mean[2 * i] - q.mean[2 * i], p.mean[2 * i + 1] - q.mean[2 * i + 1]);
                let (u, v) = pinv.mul_vec(dm);
                let maha = dm.0 * u + dm.1 * v;
                total += 0.5 * (tr + maha - 2.0 + sp.det().ln() - sq.det().ln());
            }
            total
        }
        _ => {
            let lp = linalg::chol(&p.cov.to_dense())?;
            let qd = q.cov.to_dense();
            let lq = linalg::chol(&qd)?;
            let tr = linalg::chol_solve_matrix(&lp, &qd).trace();
            let dm = &p.mean - &q.mean;
            let maha = dm.dot(&linalg::chol_solve(&lp, &dm));
            0.5 * (tr + maha - q.dim() as f64 + linalg::chol_logdet(&lp) - linalg::chol_logdet(&lq))
        }
    };
    Ok(kl.max(0.0))
}

/// Sum of information terms: Σ⁻¹ = Σ_k P_k, μ = Σ·Σ_k η_k.
pub fn info_combine(terms: &[InfoTerm]) -> Result<GaussianBelief> {
    let first = terms
        .first()
        .ok_or_else(|| Error::InvalidArgument("info_combine needs at least one term".into()))?;
    let d = first.precision.dim();
    let mut precision = first.precision.clone();
    let mut shift = first.shift.clone();
    check_dim("information vector", d, shift.len())?;
    for t in &terms[1..] {
        precision = precision.add(&t.precision)?;
        check_dim("information vector", d, t.shift.len())?;
        shift += &t.shift;
    }
    match precision {
        SymMatrix::Blocks(blocks) => {
            let mut mean = DVector::zeros(d);
            let mut cov = Vec::with_capacity(blocks.len());
            for (i, b) in blocks.iter().enumerate() {
                let inv = b
                    .inverse(2 * i)
                    .map_err(|_| Error::PosteriorPrecisionNotPd { pivot: 2 * i })?;
                let (x, y) = inv.mul_vec((shift[2 * i], shift[2 * i + 1]));
                mean[2 * i] = x;
                mean[2 * i + 1] = y;
                cov.push(inv);
            }
            Ok(GaussianBelief {
                mean,
                cov: SymMatrix::Blocks(cov),
            })
        }
        SymMatrix::Dense(m) => {
            let l = linalg::chol(&linalg::symmetrize(&m)).map_err(|e| match e {
                Error::NotPositiveDefinite { pivot, .. } => Error::PosteriorPrecisionNotPd { pivot },
                other => other,
            })?;
            let mean = linalg::chol_solve(&l, &shift);
            let cov = linalg::chol_inverse(&l);
            Ok(GaussianBelief {
                mean,
                cov: SymMatrix::Dense(cov),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        linalg::symmetrize(&(&a * a.transpose() + DMatrix::identity(n, n) * 0.3))
    }

    fn random_blocks(k: usize, rng: &mut impl Rng) -> Vec<SymBlock> {
        (0..k)
            .map(|_| {
                let m = random_spd(2, rng);
                SymBlock {
                    xx: m[(0, 0)],
                    xy: m[(0, 1)],
                    yy: m[(1, 1)],
                }
            })
            .collect()
    }

    fn random_vec(n: usize, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0))
    }

    fn one_d(mean: f64, var: f64) -> GaussianBelief {
        GaussianBelief::dense(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
            .unwrap()
    }

    #[test]
    fn degenerate_spread_samples_at_mean() {
        let g = GaussianBelief::dense(DVector::zeros(3), DMatrix::identity(3, 3) * 1e-20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = g.sample(4, &mut rng).unwrap();
        assert!(s.amax() < 1e-8);
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let g = GaussianBelief::isotropic(mu.clone(), 1.0).unwrap();
        let n = 100_000;
        let s = g.sample(n, &mut rng).unwrap();
        for j in 0..4 {
            let m = s.column(j).mean();
            assert!((m - mu[j]).abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = GaussianBelief::dense(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let a = g.sample(5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = g.sample(5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pushforward_identity_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GaussianBelief::dense(random_vec(3, &mut rng), random_spd(3, &mut rng)).unwrap();
        let same = g.pushforward(&LinearGaussianMap::noiseless(DMatrix::identity(3, 3))).unwrap();
        assert_eq!(same.mean(), g.mean());
        assert!((same.dense_cov() - g.dense_cov()).amax() < 1e-15);

        let zero_mean = GaussianBelief::dense(DVector::zeros(3), random_spd(3, &mut rng)).unwrap();
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let out = zero_mean.pushforward(&LinearGaussianMap::noiseless(a)).unwrap();
        assert_eq!(out.mean(), &DVector::zeros(3));
    }

    #[test]
    fn pushforward_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 4;
        let g = GaussianBelief::dense(random_vec(d, &mut rng), random_spd(d, &mut rng)).unwrap();
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let q = random_spd(d, &mut rng);
        let map = LinearGaussianMap::new(a.clone(), q.clone()).unwrap();
        let exact = g.pushforward(&map).unwrap();

        // oracle: push samples through z ↦ Az + ε
        let n = 1_000_000;
        let zs = g.sample(n, &mut rng).unwrap();
        let noise = GaussianBelief::dense(DVector::zeros(d), q).unwrap();
        let eps = noise.sample(n, &mut rng).unwrap();
        let pushed = zs * a.transpose() + eps;
        let mean = DVector::from_fn(d, |j, _| pushed.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |r, c| pushed[(r, c)] - mean[c]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let ec = exact.dense_cov();
        for j in 0..d {
            let se = (ec[(j, j)] / n as f64).sqrt();
            assert!((mean[j] - exact.mean()[j]).abs() < 3.0 * se, "mean {j}");
            for k in 0..d {
                let var_se = ((ec[(j, j)] * ec[(k, k)] + ec[(j, k)].powi(2)) / n as f64).sqrt();
                assert!((cov[(j, k)] - ec[(j, k)]).abs() < 3.0 * var_se, "cov {j},{k}");
            }
        }
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(gauss_kl(&one_d(0.0, 1.0), &one_d(0.0, 1.0)).unwrap(), 0.0);
        assert!((gauss_kl(&one_d(1.0, 1.0), &one_d(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_singular_reference() {
        let q = one_d(0.0, 1.0);
        let p = GaussianBelief {
            mean: DVector::zeros(1),
            cov: SymMatrix::Dense(DMatrix::zeros(1, 1)),
        };
        assert!(matches!(gauss_kl(&q, &p), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let q = GaussianBelief::dense(random_vec(d, &mut rng), random_spd(d, &mut rng)).unwrap();
        let p = GaussianBelief::dense(random_vec(d, &mut rng), random_spd(d, &mut rng)).unwrap();
        let exact = gauss_kl(&q, &p).unwrap();
        let (mean, se) = mc_kl(&q, &p, 100_000, &mut rng);
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    /// Monte-Carlo estimate of E_q[log q − log p] with its standard error.
    pub(crate) fn mc_kl(
        q: &GaussianBelief,
        p: &GaussianBelief,
        n: usize,
        rng: &mut impl Rng,
    ) -> (f64, f64) {
        let logpdf = |g: &GaussianBelief, z: &DVector<f64>| {
            let l = linalg::chol(&g.dense_cov()).unwrap();
            let dz = z - g.mean();
            let w = linalg::solve_lower(&l, &dz);
            -0.5 * w.dot(&w)
                - 0.5 * linalg::chol_logdet(&l)
                - 0.5 * g.dim() as f64 * (2.0 * std::f64::consts::PI).ln()
        };
        let s = q.sample(n, rng).unwrap();
        let vals: Vec<f64> = (0..n)
            .map(|r| {
                let z = s.row(r).transpose();
                logpdf(q, &z) - logpdf(p, &z)
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        (mean, (var / n as f64).sqrt())
    }

    #[test]
    fn info_combine_single_term_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = GaussianBelief::dense(random_vec(3, &mut rng), random_spd(3, &mut rng)).unwrap();
        let out = info_combine(&[InfoTerm::from_belief(&g).unwrap()]).unwrap();
        assert!((out.mean() - g.mean()).amax() < 1e-10);
        assert!((out.dense_cov() - g.dense_cov()).amax() < 1e-10);
    }

    #[test]
    fn info_combine_doubles_precision() {
        let t = InfoTerm::from_belief(&one_d(0.0, 1.0)).unwrap();
        let out = info_combine(&[t.clone(), t]).unwrap();
        assert_eq!(out.mean()[0], 0.0);
        assert!((out.dense_cov()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn info_combine_matches_grid_quadrature() {
        let terms = [(0.3, 0.8), (-1.2, 2.5), (0.9, 0.4)];
        let infos: Vec<InfoTerm> = terms
            .iter()
            .map(|&(m, v)| InfoTerm::from_belief(&one_d(m, v)).unwrap())
            .collect();
        let out = info_combine(&infos).unwrap();

        // oracle: normalize the product of densities on a fine grid
        let (lo, hi, n) = (-10.0, 10.0, 200_001);
        let h = (hi - lo) / (n - 1) as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let x = lo + i as f64 * h;
            let logp: f64 = terms.iter().map(|&(m, v)| -0.5 * (x - m) * (x - m) / v).sum();
            let w = logp.exp();
            z += w;
            m1 += w * x;
            m2 += w * x * x;
        }
        let mean = m1 / z;
        let var = m2 / z - mean * mean;
        assert!((out.mean()[0] - mean).abs() < 1e-8);
        assert!((out.dense_cov()[(0, 0)] - var).abs() < 1e-8);
    }

    #[test]
    fn info_combine_reports_indefinite_sum() {
        let a = InfoTerm {
            precision: SymMatrix::Dense(DMatrix::from_element(1, 1, 1.0)),
            shift: DVector::zeros(1),
        };
        let b = InfoTerm {
            precision: SymMatrix::Dense(DMatrix::from_element(1, 1, -2.0)),
            shift: DVector::zeros(1),
        };
        assert!(matches!(
            info_combine(&[a, b]),
            Err(Error::PosteriorPrecisionNotPd { pivot: 0 })
        ));
    }

    #[test]
    fn block_and_dense_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let k = 3;
            let g = GaussianBelief::blocks(random_vec(2 * k, &mut rng), random_blocks(k, &mut rng))
                .unwrap();
            let h = GaussianBelief::blocks(random_vec(2 * k, &mut rng), random_blocks(k, &mut rng))
                .unwrap();
            let gd = g.to_dense();
            let hd = h.to_dense();
            assert!(!gd.is_block());

            let klb = gauss_kl(&g, &h).unwrap();
            let kld = gauss_kl(&gd, &hd).unwrap();
            assert!((klb - kld).abs() < 1e-12 * (1.0 + kld));

            let mut a = DMatrix::zeros(2 * k, 2 * k);
            for i in 0..k {
                for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    a[(2 * i + r, 2 * i + c)] = rng.gen_range(-1.5..1.5);
                }
            }
            let q = DMatrix::from_diagonal(&DVector::from_fn(2 * k, |_, _| rng.gen_range(0.0..0.5)));
            let map = LinearGaussianMap::new(a, q).unwrap();
            let pb = g.pushforward(&map).unwrap();
            let pd = gd.pushforward(&map).unwrap();
            assert!(pb.is_block());
            assert!((pb.mean() - pd.mean()).amax() < 1e-12);
            assert!((pb.dense_cov() - pd.dense_cov()).amax() < 1e-12);

            let terms_b = [InfoTerm::from_belief(&g).unwrap(), InfoTerm::from_belief(&h).unwrap()];
            let terms_d = [InfoTerm::from_belief(&gd).unwrap(), InfoTerm::from_belief(&hd).unwrap()];
            let cb = info_combine(&terms_b).unwrap();
            let cd = info_combine(&terms_d).unwrap();
            assert!(cb.is_block());
            assert!((cb.mean() - cd.mean()).amax() < 1e-12 * (1.0 + cd.mean().amax()));
            assert!((cb.dense_cov() - cd.dense_cov()).amax() < 1e-12);
        }
    }

    #[test]
    fn dense_pushforward_leaves_block_mode_when_coupled() {
        let g = GaussianBelief::isotropic(DVector::zeros(4), 1.0).unwrap();
        let a = DMatrix::from_fn(4, 4, |i, j| if i == j || (i == 0 && j == 3) { 1.0 } else { 0.0 });
        let out = g.pushforward(&LinearGaussianMap::noiseless(a)).unwrap();
        assert!(!out.is_block());
    }

    #[test]
    fn block_storage_matches_dense_elementwise() {
        let g = GaussianBelief::blocks(
            DVector::zeros(4),
            vec![SymBlock { xx: 2.0, xy: 0.5, yy: 1.0 }, SymBlock::diag(3.0, 4.0)],
        )
        .unwrap();
        let d = g.dense_cov();
        assert_eq!(d[(0, 1)], 0.5);
        assert_eq!(d[(1, 0)], 0.5);
        assert_eq!(d[(0, 2)], 0.0);
        assert_eq!(d[(3, 3)], 4.0);
        assert_eq!(g.to_dense().to_blocks().unwrap(), g);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kl_nonnegative_and_zero_on_equal(seed in any::<u64>(), d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = GaussianBelief::dense(random_vec(d, &mut rng), random_spd(d, &mut rng)).unwrap();
            let p = GaussianBelief::dense(random_vec(d, &mut rng), random_spd(d, &mut rng)).unwrap();
            prop_assert!(gauss_kl(&q, &p).unwrap() >= 0.0);
            prop_assert!(gauss_kl(&q, &q).unwrap() < 1e-10);
        }

        #[test]
        fn pushforward_composes(seed in any::<u64>(), d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = GaussianBelief::dense(random_vec(d, &mut rng), random_spd(d, &mut rng)).unwrap();
            let m1 = LinearGaussianMap::new(DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0)), random_spd(d, &mut rng)).unwrap();
            let m2 = LinearGaussianMap::new(DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0)), random_spd(d, &mut rng)).unwrap();
            let twice = g.pushforward(&m1).unwrap().pushforward(&m2).unwrap();
            let once = g.pushforward(&m1.then(&m2)).unwrap();
            prop_assert!((twice.mean() - once.mean()).amax() < 1e-10);
            prop_assert!((twice.dense_cov() - once.dense_cov()).amax() < 1e-10);
        }

        #[test]
        fn info_combine_permutation_invariant(seed in any::<u64>(), d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let terms: Vec<InfoTerm> = (0..3).map(|_| {
                let g = GaussianBelief::dense(random_vec(d, &mut rng), random_spd(d, &mut rng)).unwrap();
                InfoTerm::from_belief(&g).unwrap()
            }).collect();
            let a = info_combine(&terms).unwrap();
            let rev: Vec<InfoTerm> = terms.iter().rev().cloned().collect();
            let b = info_combine(&rev).unwrap();
            prop_assert!((a.mean() - b.mean()).amax() < 1e-12 * (1.0 + a.mean().amax()));
            prop_assert!((a.dense_cov() - b.dense_cov()).amax() < 1e-12 * (1.0 + a.dense_cov().amax()));
        }
    }
}
