//! Frictionless double pendulum with unit masses and unit bars.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::rk4_integrate;
use crate::error::Result;

pub const GRAVITY: f64 = 9.8;

/// Angles are measured from the downward vertical.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    pub theta1: f64,
    pub theta2: f64,
    pub omega1: f64,
    pub omega2: f64,
}

impl PendulumState {
    /// Vector layout `(θ₁, θ₂, ω₁, ω₂)`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.theta1, self.theta2, self.omega1, self.omega2])
    }

    pub fn from_slice(z: &[f64]) -> Self {
        PendulumState {
            theta1: z[0],
            theta2: z[1],
            omega1: z[2],
            omega2: z[3],
        }
    }

    /// Angles folded into (−π, π].
    pub fn wrapped(&self) -> Self {
        PendulumState {
            theta1: wrap_angle(self.theta1),
            theta2: wrap_angle(self.theta2),
            ..*self
        }
    }

    /// Kinetic plus potential energy (zero potential at the pivot height).
    pub fn energy(&self) -> f64 {
        let kinetic = 0.5 * self.omega1 * self.omega1
            + 0.5
                * (self.omega1 * self.omega1
                    + self.omega2 * self.omega2
                    + 2.0 * self.omega1 * self.omega2 * (self.theta1 - self.theta2).cos());
        let potential = -2.0 * GRAVITY * self.theta1.cos() - GRAVITY * self.theta2.cos();
        kinetic + potential
    }
}

/// Maps an angle into (−π, π].
pub fn wrap_angle(x: f64) -> f64 {
    use std::f64::consts::PI;
    let mut y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

/// Time derivative of `(θ₁, θ₂, ω₁, ω₂)`.
pub fn pendulum_deriv(s: &PendulumState) -> DVector<f64> {
    let (m1, m2, l1, l2, g) = (1.0, 1.0, 1.0, 1.0, GRAVITY);
    let delta = s.theta2 - s.theta1;
    let (sd, cd) = delta.sin_cos();
    let den1 = (m1 + m2) * l1 - m2 * l1 * cd * cd;
    let dw1 = (m2 * l1 * s.omega1 * s.omega1 * sd * cd
        + m2 * g * s.theta2.sin() * cd
        + m2 * l2 * s.omega2 * s.omega2 * sd
        - (m1 + m2) * g * s.theta1.sin())
        / den1;
    let den2 = (l2 / l1) * den1;
    let dw2 = (-m2 * l2 * s.omega2 * s.omega2 * sd * cd
        + (m1 + m2) * g * s.theta1.sin() * cd
        - (m1 + m2) * l1 * s.omega1 * s.omega1 * sd
        - (m1 + m2) * g * s.theta2.sin())
        / den2;
    DVector::from_vec(vec![s.omega1, s.omega2, dw1, dw2])
}

/// Noiseless bob positions `(x₁, y₁, x₂, y₂)`.
pub fn pendulum_positions(s: &PendulumState) -> DVector<f64> {
    let x1 = s.theta1.sin();
    let y1 = -s.theta1.cos();
    DVector::from_vec(vec![x1, y1, x1 + s.theta2.sin(), y1 - s.theta2.cos()])
}

/// Bob positions with additive Gaussian noise of standard deviation `sigma`.
pub fn pendulum_observe<R: Rng + ?Sized>(s: &PendulumState, sigma: f64, rng: &mut R) -> DVector<f64> {
    let mut o = pendulum_positions(s);
    if sigma > 0.0 {
        for v in o.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    o
}

/// Advances a state vector by `dt` with fixed-step RK4.
pub fn pendulum_advance(z: &DVector<f64>, dt: f64, substeps: usize) -> Result<DVector<f64>> {
    rk4_integrate(
        |v| pendulum_deriv(&PendulumState::from_slice(v.as_slice())),
        z,
        dt,
        substeps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn hanging_rest_is_equilibrium() {
        let s = PendulumState { theta1: 0.0, theta2: 0.0, omega1: 0.0, omega2: 0.0 };
        assert_eq!(pendulum_deriv(&s), DVector::zeros(4));
    }

    #[test]
    fn zero_velocity_gives_zero_angle_rates() {
        let s = PendulumState { theta1: 0.7, theta2: -1.3, omega1: 0.0, omega2: 0.0 };
        let d = pendulum_deriv(&s);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 0.0);
        assert!(d[2] != 0.0 && d[3] != 0.0);
    }

    fn energy_gradient(s: &PendulumState) -> [f64; 4] {
        let g = GRAVITY;
        let c = (s.theta1 - s.theta2).cos();
        let sn = (s.theta1 - s.theta2).sin();
        [
            -s.omega1 * s.omega2 * sn + 2.0 * g * s.theta1.sin(),
            s.omega1 * s.omega2 * sn + g * s.theta2.sin(),
            2.0 * s.omega1 + s.omega2 * c,
            s.omega2 + s.omega1 * c,
        ]
    }

    #[test]
    fn derivative_conserves_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let s = PendulumState {
                theta1: rng.gen_range(-PI..PI),
                theta2: rng.gen_range(-PI..PI),
                omega1: rng.gen_range(-5.0..5.0),
                omega2: rng.gen_range(-5.0..5.0),
            };
            let d = pendulum_deriv(&s);
            let grad = energy_gradient(&s);
            let de: f64 = (0..4).map(|i| grad[i] * d[i]).sum();
            assert!(de.abs() < 1e-8, "dE/dt = {de}");
        }
    }

    #[test]
    fn observe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hang = PendulumState { theta1: 0.0, theta2: 0.0, omega1: 0.0, omega2: 0.0 };
        assert_eq!(pendulum_observe(&hang, 0.0, &mut rng).as_slice(), &[0.0, -1.0, 0.0, -2.0]);
        let side = PendulumState { theta1: FRAC_PI_2, ..hang };
        let o = pendulum_observe(&side, 0.0, &mut rng);
        for (a, b) in o.iter().zip([1.0, 0.0, 1.0, -1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn observation_noise_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = PendulumState { theta1: 0.4, theta2: -0.9, omega1: 0.0, omega2: 0.0 };
        let clean = pendulum_positions(&s);
        let n = 100_000;
        let mut sums = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let o = pendulum_observe(&s, 0.1, &mut rng);
            for j in 0..4 {
                let e = o[j] - clean[j];
                sums[j] += e;
                sq[j] += e * e;
            }
        }
        for j in 0..4 {
            let m = sums[j] / n as f64;
            let sd = (sq[j] / n as f64 - m * m).sqrt();
            assert!((0.098..=0.102).contains(&sd), "coordinate {j}: {sd}");
        }
    }

    #[test]
    fn energy_drift_over_three_seconds() {
        let s0 = PendulumState { theta1: 2.0, theta2: -1.0, omega1: 0.5, omega2: -0.3 };
        let e0 = s0.energy();
        let mut z = s0.to_vector();
        for _ in 0..3000 {
            z = pendulum_advance(&z, 0.001, 10).unwrap();
        }
        let e1 = PendulumState::from_slice(z.as_slice()).energy();
        assert!(((e1 - e0) / e0).abs() < 1e-5);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI + 0.5) - (-PI + 0.5)).abs() < 1e-12);
        assert!((wrap_angle(0.25) - 0.25).abs() < 1e-15);
    }
}
