use nalgebra::DVector;

use crate::error::{Error, Result};

/// Fixed-step classical Runge–Kutta over one interval of length `dt`, split
/// into `substeps` equal steps.
pub fn rk4_integrate<F>(deriv: F, z0: &DVector<f64>, dt: f64, substeps: usize) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be ≥ 1".into()));
    }
    let h = dt / substeps as f64;
    let mut z = z0.clone();
    let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
    for substep in 0..substeps {
        let k1 = deriv(&z);
        let k2 = deriv(&(&z + &k1 * (0.5 * h)));
        let k3 = deriv(&(&z + &k2 * (0.5 * h)));
        let k4 = deriv(&(&z + &k3 * h));
        if !(finite(&k1) && finite(&k2) && finite(&k3) && finite(&k4)) {
            return Err(Error::Integration { substep });
        }
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::lorenz96::lorenz96_deriv;

    #[test]
    fn zero_field_is_identity() {
        let z0 = DVector::from_vec(vec![1.0, -2.0]);
        let z = rk4_integrate(|z| DVector::zeros(z.len()), &z0, 0.5, 3).unwrap();
        assert_eq!(z, z0);
    }

    #[test]
    fn exponential_growth() {
        let z = rk4_integrate(|z| z.clone(), &DVector::from_element(1, 1.0), 0.1, 1).unwrap();
        assert!((z[0] - 0.1f64.exp()).abs() < 1e-7);
        assert!((z[0] - 1.105_170_8).abs() < 1e-7);
    }

    #[test]
    fn reports_non_finite_substep() {
        let err = rk4_integrate(
            |z| if z[0] > 1.5 { DVector::from_element(1, f64::NAN) } else { DVector::from_element(1, 1.0) },
            &DVector::from_element(1, 0.0),
            4.0,
            4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Integration { substep: 1 }));
    }

    /// Dormand–Prince 5(4) with step control; independent of the RK4 path.
    fn dopri<F: Fn(&[f64]) -> Vec<f64>>(f: F, y0: &[f64], t_end: f64, tol: f64) -> Vec<f64> {
        const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
        const A: [[f64; 6]; 7] = [
            [0.0; 6],
            [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
            [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
            [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
            [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
            [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
            [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
        ];
        const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
        const B4: [f64; 7] = [
            5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0,
        ];
        let _ = C;
        let n = y0.len();
        let mut y = y0.to_vec();
        let mut t = 0.0;
        let mut h = 1e-3;
        while t < t_end {
            if t + h > t_end {
                h = t_end - t;
            }
            let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
            for s in 0..7 {
                let ys: Vec<f64> = (0..n)
                    .map(|i| y[i] + h * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>())
                    .collect();
                k.push(f(&ys));
            }
            let y5: Vec<f64> = (0..n).map(|i| y[i] + h * (0..7).map(|s| B5[s] * k[s][i]).sum::<f64>()).collect();
            let y4: Vec<f64> = (0..n).map(|i| y[i] + h * (0..7).map(|s| B4[s] * k[s][i]).sum::<f64>()).collect();
            let err = (0..n).map(|i| (y5[i] - y4[i]).abs()).fold(0.0, f64::max);
            if err <= tol {
                t += h;
                y = y5;
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * (tol / err).powf(0.2)).clamp(0.2, 5.0) };
            h *= factor;
        }
        y
    }

    #[test]
    fn matches_adaptive_integrator_on_lorenz96() {
        use rand::{Rng, SeedableRng};
        use rand_distr::StandardNormal;
        // states drawn the way Lorenz96 trajectories are initialised
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let naive = |z: &[f64]| {
            let n = z.len();
            (0..n)
                .map(|i| (z[(i + 1) % n] - z[(i + n - 2) % n]) * z[(i + n - 1) % n] - z[i] + 8.0)
                .collect::<Vec<f64>>()
        };
        let mut errs: Vec<f64> = (0..21)
            .map(|_| {
                let z0 = DVector::from_fn(5, |_, _| 8.0 + rng.sample::<f64, _>(StandardNormal));
                let rk = rk4_integrate(|z| lorenz96_deriv(z, 8.0).unwrap(), &z0, 0.03, 4).unwrap();
                let reference = dopri(naive, z0.as_slice(), 0.03, 1e-13);
                rk.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        // RK4 truncation at h = 0.0075 sits right around 1e-6; the typical draw
        // is below it and the tail only slightly above
        assert!(errs[10] < 1e-6, "median {}", errs[10]);
        assert!(errs[20] < 2e-6, "worst {}", errs[20]);
    }
}
