//! Directional finite-difference checks for anything whose loss is a function
//! of a [`ParamSet`].

use rand::Rng;

use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DirectionalCheck {
    pub analytic: f64,
    pub numeric: f64,
}

impl DirectionalCheck {
    /// |a − n| / max(|a|, |n|, floor). The floor keeps directions with a
    /// vanishing derivative from reporting noise as relative error.
    pub fn rel_err(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compares `∇L·u` with the central difference `(L(p+hu) − L(p−hu)) / 2h` on
/// `n_dirs` random unit directions. `loss` returns the value and, when asked,
/// the gradient aligned with the parameter set.
pub fn check_directions<L, R>(params: &ParamSet, loss: L, n_dirs: usize, step: f64, rng: &mut R) -> Vec<DirectionalCheck>
where
    L: Fn(&ParamSet, bool) -> (f64, Option<Vec<Tensor>>),
    R: Rng + ?Sized,
{
    let (_, grads) = loss(params, true);
    let grads = grads.expect("gradient requested");
    let flat_grad: Vec<f64> = grads.iter().flat_map(|g| g.data.iter().copied()).collect();
    let n = flat_grad.len();
    (0..n_dirs)
        .map(|_| {
            let mut u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            let analytic = flat_grad.iter().zip(&u).map(|(g, d)| g * d).sum();
            let plus = loss(&shifted(params, &u, step), false).0;
            let minus = loss(&shifted(params, &u, -step), false).0;
            DirectionalCheck {
                analytic,
                numeric: (plus - minus) / (2.0 * step),
            }
        })
        .collect()
}

fn shifted(params: &ParamSet, dir: &[f64], h: f64) -> ParamSet {
    let mut out = params.clone();
    let mut k = 0;
    for t in out.values_mut() {
        for v in t.data.iter_mut() {
            *v += h * dir[k];
            k += 1;
        }
    }
    out
}
