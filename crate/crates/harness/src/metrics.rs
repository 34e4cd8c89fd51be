//! Assimilation metrics: final-window RMSE, normalised errors and the
//! histogram Jeffreys divergence against a unit Gaussian.

use dbf_base::envs::wrap_angle;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

fn metric_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Metric(msg.into())
}

fn diff(a: f64, b: f64, angle: bool) -> f64 {
    if angle {
        wrap_angle(a - b)
    } else {
        a - b
    }
}

fn check_dims(dims: &[usize], width: usize) -> Result<()> {
    if dims.is_empty() {
        return Err(metric_err("no dimensions selected"));
    }
    if let Some(d) = dims.iter().find(|&&d| d >= width) {
        return Err(metric_err(format!("dimension {d} out of range for width {width}")));
    }
    Ok(())
}

/// Root mean square error over the last `k` steps and the selected `dims`.
/// Differences on `angle_dims` are wrapped into (−π, π] first.
pub fn rmse_final_k(pred: &[DVector<f64>], truth: &[DVector<f64>], k: usize, dims: &[usize], angle_dims: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(metric_err(format!("{} predictions for {} truth steps", pred.len(), truth.len())));
    }
    let steps = truth.len();
    if k == 0 || steps < k {
        return Err(metric_err(format!("need T ≥ k ≥ 1, got T = {steps}, k = {k}")));
    }
    check_dims(dims, truth[0].len())?;
    let mut sum = 0.0;
    for t in steps - k..steps {
        if pred[t].len() != truth[t].len() {
            return Err(metric_err(format!("step {t}: prediction width {} vs truth {}", pred[t].len(), truth[t].len())));
        }
        for &d in dims {
            let e = diff(pred[t][d], truth[t][d], angle_dims.contains(&d));
            sum += e * e;
        }
    }
    Ok((sum / (k * dims.len()) as f64).sqrt())
}

/// Per-step RMSE pooled over trajectories and `dims`: one RMSE-vs-step curve.
pub fn rmse_per_step(pred: &[Vec<DVector<f64>>], truth: &[Vec<DVector<f64>>], dims: &[usize], angle_dims: &[usize]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(metric_err("prediction and truth sets must be non-empty and of equal size"));
    }
    let steps = truth[0].len();
    check_dims(dims, truth[0][0].len())?;
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut sum = 0.0;
        for (p, z) in pred.iter().zip(truth) {
            if p.len() != steps || z.len() != steps {
                return Err(metric_err("ragged trajectories"));
            }
            for &d in dims {
                let e = diff(p[t][d], z[t][d], angle_dims.contains(&d));
                sum += e * e;
            }
        }
        out.push((sum / (pred.len() * dims.len()) as f64).sqrt());
    }
    Ok(out)
}

/// A (step, dimension) cell whose samples had zero spread.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub step: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormalizedErrors {
    pub values: Vec<f64>,
    pub skipped: Vec<SkippedCell>,
}

/// ε = (z_sample − z_true) / δ with δ the per-step, per-dimension standard
/// deviation of the samples (population form). `samples[t]` is `n × d`.
/// Cells with δ = 0 are skipped and reported.
pub fn normalized_errors(samples: &[DMatrix<f64>], truth: &[DVector<f64>], dims: &[usize]) -> Result<NormalizedErrors> {
    if samples.len() != truth.len() {
        return Err(metric_err(format!("{} sample sets for {} truth steps", samples.len(), truth.len())));
    }
    let mut out = NormalizedErrors::default();
    for (t, (s, z)) in samples.iter().zip(truth).enumerate() {
        check_dims(dims, s.ncols().min(z.len()))?;
        let n = s.nrows();
        if n == 0 {
            return Err(metric_err(format!("step {t} has no samples")));
        }
        for &d in dims {
            let col = s.column(d);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let delta = var.sqrt();
            if !(delta > 0.0) {
                out.skipped.push(SkippedCell { step: t, dim: d });
                continue;
            }
            out.values.extend(col.iter().map(|v| (v - z[d]) / delta));
        }
    }
    Ok(out)
}

/// Equal-width bins on `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Default for Bins {
    fn default() -> Self {
        Bins { lo: -5.0, hi: 5.0, count: 50 }
    }
}

impl Bins {
    pub fn edges(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.count as f64;
        (0..=self.count).map(|i| self.lo + w * i as f64).collect()
    }

    /// Counts of `values` per bin; values outside `[lo, hi]` are dropped and
    /// `hi` itself falls in the last bin.
    pub fn histogram(&self, values: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.count];
        let w = (self.hi - self.lo) / self.count as f64;
        for &v in values {
            if !(v >= self.lo && v <= self.hi) {
                continue;
            }
            let i = (((v - self.lo) / w) as usize).min(self.count - 1);
            h[i] += 1.0;
        }
        h
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Unit-Gaussian probability mass of each bin given by `edges`.
pub fn unit_gaussian_bin_mass(edges: &[f64]) -> Vec<f64> {
    edges.windows(2).map(|w| std_normal_cdf(w[1]) - std_normal_cdf(w[0])).collect()
}

/// Symmetric KL `(KL[p‖q] + KL[q‖p]) / 2` between a histogram (`weights`
/// per bin) and the unit Gaussian integrated over the same bins. Both sides
/// are renormalised over the bins the histogram occupies.
pub fn jeffreys_binned(weights: &[f64], edges: &[f64]) -> Result<f64> {
    if edges.len() != weights.len() + 1 {
        return Err(metric_err("need one more edge than bins"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(metric_err("histogram weights must be finite and ≥ 0"));
    }
    let q_all = unit_gaussian_bin_mass(edges);
    let support: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0 && q_all[i] > 0.0).collect();
    if support.is_empty() {
        return Err(metric_err("empty histogram"));
    }
    if support.len() < 2 {
        return Err(metric_err("histogram occupies fewer than two bins"));
    }
    let zp: f64 = support.iter().map(|&i| weights[i]).sum();
    let zq: f64 = support.iter().map(|&i| q_all[i]).sum();
    let mut js = 0.0;
    for &i in &support {
        let p = weights[i] / zp;
        let q = q_all[i] / zq;
        let l = (p / q).ln();
        js += 0.5 * (p - q) * l;
    }
    Ok(js)
}

/// Jeffreys divergence of `values` from the unit Gaussian on `bins`.
pub fn jeffreys_vs_unit_gaussian(values: &[f64], bins: &Bins) -> Result<f64> {
    if bins.count == 0 || !(bins.hi > bins.lo) {
        return Err(metric_err("bins need count ≥ 1 and hi > lo"));
    }
    let h = bins.histogram(values);
    if h.iter().all(|c| *c == 0.0) {
        return Err(metric_err("empty histogram"));
    }
    jeffreys_binned(&h, &bins.edges())
}

/// Mean ± standard deviation over a set of per-trajectory values. The
/// spread is the sample standard deviation (n − 1), 0 for a single value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, std, n }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn seqs(rows: &[&[f64]]) -> Vec<DVector<f64>> {
        rows.iter().map(|r| DVector::from_column_slice(r)).collect()
    }

    #[test]
    fn rmse_of_exact_prediction_is_zero() {
        let z = seqs(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(rmse_final_k(&z, &z, 2, &[0, 1], &[]).unwrap(), 0.0);
    }

    #[test]
    fn rmse_of_unit_offset_is_one() {
        let z = seqs(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let p: Vec<_> = z.iter().map(|v| v.add_scalar(1.0)).collect();
        assert!((rmse_final_k(&p, &z, 3, &[0, 1], &[]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rmse_rejects_short_series() {
        let z = seqs(&[&[1.0], &[2.0]]);
        assert!(rmse_final_k(&z, &z, 3, &[0], &[]).is_err());
        assert!(rmse_final_k(&z, &z, 0, &[0], &[]).is_err());
    }

    #[test]
    fn rmse_wraps_angles() {
        let z = seqs(&[&[PI - 0.05]]);
        let p = seqs(&[&[-PI + 0.05]]);
        assert!((rmse_final_k(&p, &z, 1, &[0], &[0]).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn two_point_samples_give_unit_errors() {
        let truth = vec![DVector::from_vec(vec![2.0, -1.0])];
        let delta = 0.7;
        let s = DMatrix::from_row_slice(2, 2, &[2.0 + delta, -1.0 + delta, 2.0 - delta, -1.0 - delta]);
        let ne = normalized_errors(&[s], &truth, &[0, 1]).unwrap();
        assert!(ne.skipped.is_empty());
        for v in ne.values {
            assert!((v.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_spread_step_is_skipped() {
        let truth = vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![0.0])];
        let s0 = DMatrix::from_element(3, 1, 1.0);
        let s1 = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let ne = normalized_errors(&[s0, s1], &truth, &[0]).unwrap();
        assert_eq!(ne.skipped, vec![SkippedCell { step: 0, dim: 0 }]);
        assert_eq!(ne.values.len(), 2);
    }

    #[test]
    fn normalized_errors_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth: Vec<_> = (0..5).map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let samples: Vec<_> = (0..5).map(|_| DMatrix::from_fn(40, 2, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
        let a = normalized_errors(&samples, &truth, &[0, 1]).unwrap();
        let ts: Vec<_> = truth.iter().map(|v| v * 10.0).collect();
        let ss: Vec<_> = samples.iter().map(|m| m * 10.0).collect();
        let b = normalized_errors(&ss, &ts, &[0, 1]).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_gaussian_histogram_has_zero_divergence() {
        let bins = Bins::default();
        let edges = bins.edges();
        let mass = unit_gaussian_bin_mass(&edges);
        let w: Vec<f64> = mass.iter().map(|m| m * 1e5).collect();
        assert!(jeffreys_binned(&w, &edges).unwrap().abs() < 1e-15);
    }

    #[test]
    fn divergence_is_positive_for_a_wider_gaussian() {
        let edges = Bins::default().edges();
        let w: Vec<f64> = edges.windows(2).map(|e| std_normal_cdf(e[1] / 2.0) - std_normal_cdf(e[0] / 2.0)).collect();
        assert!(jeffreys_binned(&w, &edges).unwrap() > 0.1);
    }

    #[test]
    fn empty_or_single_bin_histograms_fail() {
        let bins = Bins::default();
        assert!(jeffreys_vs_unit_gaussian(&[], &bins).is_err());
        assert!(jeffreys_vs_unit_gaussian(&[100.0], &bins).is_err());
        assert!(jeffreys_vs_unit_gaussian(&[0.01, 0.02], &bins).is_err());
    }

    #[test]
    fn cdf_matches_known_values() {
        assert!((std_normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((std_normal_cdf(1.96) - 0.9750021048517795).abs() < 1e-12);
        assert!((std_normal_cdf(-1.0) - 0.15865525393145707).abs() < 1e-12);
    }

    #[test]
    fn summary_matches_hand_values() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[7.0]).std, 0.0);
    }
}
