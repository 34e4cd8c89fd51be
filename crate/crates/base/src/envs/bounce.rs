//! Patches moving at constant velocity inside a square frame, reflecting off
//! the edges. The dynamics stay linear in unbounded coordinates; reflection is
//! folded into the observation operator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::LinearGaussianMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BouncePatchConfig {
    pub frame: usize,
    pub patch: usize,
    pub dt: f64,
    pub sigma: f64,
    pub n_objects: usize,
    /// Initial velocities are drawn uniformly from ±max_speed per axis.
    pub max_speed: f64,
    /// Log-variance of the (diagonal) process noise used by filters.
    pub log_q: f64,
    /// Row-major `patch × patch` intensity grids, one per object.
    pub patches: Vec<Vec<f64>>,
}

impl BouncePatchConfig {
    /// Small frame with random patch textures drawn from `seed`.
    pub fn desk<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let (frame, patch, n_objects) = (12, 5, 1);
        let patches = (0..n_objects)
            .map(|_| (0..patch * patch).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        BouncePatchConfig {
            frame,
            patch,
            dt: 1.0,
            sigma: 0.1,
            n_objects,
            max_speed: 1.0,
            log_q: -4.0,
            patches,
        }
    }

    pub fn period(&self) -> f64 {
        (self.frame - self.patch) as f64
    }

    pub fn state_dim(&self) -> usize {
        4 * self.n_objects
    }

    pub fn obs_dim(&self) -> usize {
        self.frame * self.frame
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch >= self.frame {
            return Err(Error::Config("patch must be smaller than frame".into()));
        }
        if !(self.dt > 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::Config("bounce dt must be > 0 and sigma ≥ 0".into()));
        }
        if self.patches.len() != self.n_objects
            || self.patches.iter().any(|p| p.len() != self.patch * self.patch)
        {
            return Err(Error::Config(format!(
                "expected {} patches of {} values",
                self.n_objects,
                self.patch * self.patch
            )));
        }
        Ok(())
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.n_objects;
        let p = self.period();
        DVector::from_fn(4 * n, |i, _| {
            if i < 2 * n {
                rng.gen_range(0.0..=p)
            } else {
                rng.gen_range(-self.max_speed..=self.max_speed)
            }
        })
    }

    pub fn render(&self, z: &[f64]) -> Vec<f64> {
        render_frame(self.frame, self.patch, &self.patches, &folded_positions(z, self.n_objects, self.period()))
    }

    pub fn observe<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> DVector<f64> {
        let mut img = self.render(z);
        if self.sigma > 0.0 {
            for v in img.iter_mut() {
                *v += self.sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        DVector::from_vec(img)
    }
}

/// Triangle-wave fold of an unbounded coordinate into `[0, period]`.
pub fn bounce_reflect(x: f64, period: f64) -> f64 {
    period - ((x.rem_euclid(2.0 * period)) - period).abs()
}

/// d(bounce_reflect)/dx: +1 on rising segments, −1 on falling ones.
pub fn bounce_reflect_slope(x: f64, period: f64) -> f64 {
    if x.rem_euclid(2.0 * period) < period {
        1.0
    } else {
        -1.0
    }
}

/// Folded `(x̃, ỹ)` per object from a paper-ordered state
/// `(x₁, y₁, …, x_n, y_n, vx₁, vy₁, …)`.
pub fn folded_positions(z: &[f64], n_objects: usize, period: f64) -> Vec<(f64, f64)> {
    (0..n_objects)
        .map(|o| (bounce_reflect(z[2 * o], period), bounce_reflect(z[2 * o + 1], period)))
        .collect()
}

fn tent(u: f64) -> f64 {
    (1.0 - u.abs()).max(0.0)
}

/// Splats each patch with bilinear weights so its top-left corner sits at the
/// continuous position `(x, y)`; overlapping patches add.
pub fn render_frame(frame: usize, patch: usize, patches: &[Vec<f64>], positions: &[(f64, f64)]) -> Vec<f64> {
    let mut img = vec![0.0; frame * frame];
    for (pat, &(x, y)) in patches.iter().zip(positions) {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for i in 0..patch {
            for j in 0..patch {
                let v = pat[i * patch + j];
                for (dr, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    let r = y0 + i as f64 + dr;
                    if wy == 0.0 || r < 0.0 || r >= frame as f64 {
                        continue;
                    }
                    for (dc, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let c = x0 + j as f64 + dc;
                        if wx == 0.0 || c < 0.0 || c >= frame as f64 {
                            continue;
                        }
                        img[r as usize * frame + c as usize] += v * wy * wx;
                    }
                }
            }
        }
    }
    img
}

/// Vector-Jacobian product of [`render_frame`]: returns the gradients with
/// respect to every patch value and every folded position.
pub fn render_vjp(
    frame: usize,
    patch: usize,
    patches: &[Vec<f64>],
    positions: &[(f64, f64)],
    grad_img: &[f64],
) -> (Vec<Vec<f64>>, Vec<(f64, f64)>) {
    let mut g_patches = vec![vec![0.0; patch * patch]; patches.len()];
    let mut g_pos = vec![(0.0, 0.0); positions.len()];
    for (o, (pat, &(x, y))) in patches.iter().zip(positions).enumerate() {
        let (x0, y0) = (x.floor(), y.floor());
        for i in 0..patch {
            for j in 0..patch {
                let v = pat[i * patch + j];
                // the tent weights as functions of (x, y) for each landing pixel
                for dr in [0.0, 1.0] {
                    let r = y0 + i as f64 + dr;
                    if r < 0.0 || r >= frame as f64 {
                        continue;
                    }
                    let uy = r - i as f64 - y;
                    let wy = tent(uy);
                    let dwy = if uy.abs() < 1.0 { uy.signum() } else { 0.0 };
                    for dc in [0.0, 1.0] {
                        let c = x0 + j as f64 + dc;
                        if c < 0.0 || c >= frame as f64 {
                            continue;
                        }
                        let ux = c - j as f64 - x;
                        let wx = tent(ux);
                        let dwx = if ux.abs() < 1.0 { ux.signum() } else { 0.0 };
                        let g = grad_img[r as usize * frame + c as usize];
                        g_patches[o][i * patch + j] += g * wy * wx;
                        g_pos[o].0 += g * v * wy * dwx;
                        g_pos[o].1 += g * v * wx * dwy;
                    }
                }
            }
        }
    }
    (g_patches, g_pos)
}

/// Constant-velocity transition in paper ordering: positions first, then
/// velocities, each as `(x₁, y₁, x₂, y₂, …)`.
pub fn constant_velocity_map(dt: f64, n_objects: usize, noise_var: f64) -> Result<LinearGaussianMap> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be > 0".into()));
    }
    let d = 4 * n_objects;
    let half = 2 * n_objects;
    let mut f = DMatrix::identity(d, d);
    for k in 0..half {
        f[(k, half + k)] = dt;
    }
    let q = DMatrix::identity(d, d) * noise_var;
    LinearGaussianMap::new(f, q)
}

/// Index order that groups each position with its own velocity:
/// `state[perm[2k]]` is coordinate k and `state[perm[2k + 1]]` its velocity.
pub fn pair_permutation(n_objects: usize) -> Vec<usize> {
    let half = 2 * n_objects;
    (0..half).flat_map(|k| [k, half + k]).collect()
}
