use serde::{Deserialize, Serialize};

use crate::error::{check, NnError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. `trainable[i] == false` leaves parameter `i` and
    /// its moments untouched. Any non-finite gradient aborts the whole step
    /// before anything is modified.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], trainable: Option<&[bool]>) -> Result<()> {
        check("adam", "parameter count", params.len(), grads.len())?;
        for (i, g) in grads.iter().enumerate() {
            check("adam", "gradient size", self.m[i].len(), g.len())?;
            if !g.is_finite() {
                return Err(NnError::Divergence {
                    param: params.names()[i].clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            if trainable.is_some_and(|mask| !mask[i]) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p.data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::scalar(v));
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = one_param(1.5);
        let mut adam = Adam::new(1e-3, &ps);
        adam.update(&mut ps, &[Tensor::scalar(0.0)], None).unwrap();
        assert_eq!(ps.values()[0].item(), 1.5);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = one_param(0.0);
        let mut adam = Adam::new(1e-3, &ps);
        adam.update(&mut ps, &[Tensor::scalar(1.0)], None).unwrap();
        let expected = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((ps.values()[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut ps = one_param(0.0);
        let mut adam = Adam::new(1e-3, &ps);
        let err = adam.update(&mut ps, &[Tensor::scalar(f64::NAN)], None).unwrap_err();
        assert!(matches!(err, NnError::Divergence { ref param } if param == "x"));
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn masked_parameter_is_frozen() {
        let mut ps = one_param(2.0);
        ps.add("y", Tensor::scalar(2.0));
        let mut adam = Adam::new(0.1, &ps);
        let g = [Tensor::scalar(1.0), Tensor::scalar(1.0)];
        adam.update(&mut ps, &g, Some(&[false, true])).unwrap();
        assert_eq!(ps.values()[0].item(), 2.0);
        assert!(ps.values()[1].item() < 2.0);
    }
}
