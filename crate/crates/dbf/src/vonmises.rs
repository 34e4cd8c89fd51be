//! Von Mises density pieces: log I₀, the ratio I₁/I₀, the log-density and a
//! rejection sampler.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{DbfError, Result};

/// Below this concentration the Bessel functions are summed as power series;
/// above it the large-argument expansion is used.
const SERIES_LIMIT: f64 = 20.0;

fn series_i0_i1(k: f64) -> (f64, f64) {
    let q = 0.25 * k * k;
    let (mut t0, mut t1) = (1.0, 0.5 * k);
    let (mut s0, mut s1) = (t0, t1);
    for j in 1..200 {
        let jf = j as f64;
        t0 *= q / (jf * jf);
        t1 *= q / (jf * (jf + 1.0));
        s0 += t0;
        s1 += t1;
        if t0 < 1e-17 * s0 && t1 < 1e-17 * s1 {
            break;
        }
    }
    (s0, s1)
}

/// `e^{-k}·√(2πk)·I_ν(k)` from the asymptotic expansion, ν ∈ {0, 1}.
fn scaled_asymptotic(nu: u32, k: f64) -> f64 {
    let mu = 4.0 * (nu * nu) as f64;
    let mut term = 1.0;
    let mut sum = 1.0;
    for j in 1..=12 {
        let odd = (2 * j - 1) as f64;
        term *= -(mu - odd * odd) / (j as f64 * 8.0 * k);
        sum += term;
        if term.abs() < 1e-17 {
            break;
        }
    }
    sum
}

/// ln I₀(κ) for κ ≥ 0.
pub fn log_i0(kappa: f64) -> f64 {
    if kappa < SERIES_LIMIT {
        series_i0_i1(kappa).0.ln()
    } else {
        kappa - 0.5 * (2.0 * PI * kappa).ln() + scaled_asymptotic(0, kappa).ln()
    }
}

/// I₁(κ)/I₀(κ), the derivative of ln I₀.
pub fn bessel_ratio(kappa: f64) -> f64 {
    if kappa < SERIES_LIMIT {
        let (i0, i1) = series_i0_i1(kappa);
        i1 / i0
    } else {
        scaled_asymptotic(1, kappa) / scaled_asymptotic(0, kappa)
    }
}

/// `κ·cos(x − μ) − ln(2π·I₀(κ))`.
pub fn vonmises_logpdf(x: f64, mu: f64, kappa: f64) -> Result<f64> {
    if !(kappa >= 0.0) {
        return Err(DbfError::NegativeConcentration(kappa));
    }
    Ok(kappa * (x - mu).cos() - (2.0 * PI).ln() - log_i0(kappa))
}

/// One draw in (−π, π] around `mu` (Best–Fisher rejection sampler).
pub fn sample_vonmises<R: Rng + ?Sized>(mu: f64, kappa: f64, rng: &mut R) -> f64 {
    let wrap = |a: f64| dbf_base::envs::wrap_angle(a);
    if kappa < 1e-8 {
        return wrap(rng.gen_range(-PI..PI));
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.gen();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        let u2: f64 = rng.gen();
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.gen();
            let theta = if u3 > 0.5 { f.acos() } else { -f.acos() };
            return wrap(mu + theta);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Plain 40-term power series, written independently of the production
    /// loop.
    fn i0_oracle(k: f64) -> f64 {
        let mut s = 0.0;
        let mut fact = 1.0;
        for j in 0..40 {
            if j > 0 {
                fact *= j as f64;
            }
            s += (k / 2.0).powi(2 * j) / (fact * fact);
        }
        s
    }

    #[test]
    fn uniform_at_zero_concentration() {
        let v = vonmises_logpdf(1.234, -0.3, 0.0).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn symmetric_about_mean() {
        let (mu, k) = (0.7, 3.3);
        for a in [0.1, 0.5, 1.0, 2.5, 3.0] {
            assert_eq!(vonmises_logpdf(mu + a, mu, k).unwrap(), vonmises_logpdf(mu - a, mu, k).unwrap());
        }
    }

    #[test]
    fn peak_value_at_unit_concentration() {
        let expected = 1.0 - (2.0 * PI * i0_oracle(1.0)).ln();
        assert!((vonmises_logpdf(0.4, 0.4, 1.0).unwrap() - expected).abs() < 1e-14);
        // I0(1) to 10 digits
        assert!((i0_oracle(1.0) - 1.266_065_877_8).abs() < 1e-10);
    }

    #[test]
    fn log_i0_matches_series_on_both_branches() {
        for k in [0.0, 0.01, 0.5, 1.0, 5.0, 12.0, 19.999, 20.0, 25.0, 35.0] {
            let want = i0_oracle(k).ln();
            assert!((log_i0(k) - want).abs() < 1e-11 * want.abs().max(1.0), "kappa {k}");
        }
        // far into the asymptotic branch the value is ≈ κ − ½ln(2πκ)
        let k: f64 = 1e4;
        assert!((log_i0(k) - (k - 0.5 * (2.0 * PI * k).ln())).abs() < 1e-4);
    }

    #[test]
    fn bessel_ratio_is_derivative_of_log_i0() {
        for k in [0.3_f64, 2.0, 10.0, 19.0, 21.0, 60.0, 148.4] {
            let h = 1e-5 * k.max(1.0);
            let fd = (log_i0(k + h) - log_i0(k - h)) / (2.0 * h);
            assert!((bessel_ratio(k) - fd).abs() < 1e-8, "kappa {k}");
        }
    }

    #[test]
    fn negative_concentration_rejected() {
        assert!(matches!(vonmises_logpdf(0.0, 0.0, -1.0), Err(DbfError::NegativeConcentration(_))));
    }

    #[test]
    fn sampler_matches_first_trigonometric_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (mu, k) in [(0.5, 2.0), (-2.0, 148.4), (3.0, 0.2)] {
            let n = 100_000;
            let (mut c, mut s) = (0.0, 0.0);
            for _ in 0..n {
                let x: f64 = sample_vonmises(mu, k, &mut rng);
                assert!(x > -PI && x <= PI);
                c += (x - mu).cos();
                s += (x - mu).sin();
            }
            let (c, s) = (c / n as f64, s / n as f64);
            // E cos(x − μ) = I1/I0, E sin = 0; std of each term ≤ 1
            let tol = 4.0 / (n as f64).sqrt();
            assert!((c - bessel_ratio(k)).abs() < tol, "mean cos {c} for kappa {k}");
            assert!(s.abs() < tol);
        }
    }
}
