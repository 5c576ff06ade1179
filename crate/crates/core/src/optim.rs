use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Adam moments and hyperparameters, one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub hyper: AdamConfig,
    pub first_moment: Vec<Vec<F>>,
    pub second_moment: Vec<Vec<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<F: Element> AdamState<F> {
    /// Zero moments shaped like `params`.
    pub fn new(hyper: AdamConfig, params: &[Tensor<F>]) -> Self {
        Self {
            step: 0,
            hyper,
            first_moment: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[&[F]]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "parameter {i}: {} values, {} grads, {} moments",
                        p.len(),
                        g.len(),
                        self.first_moment[i].len()
                    ),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (F::from_f64_lossy(beta1), F::from_f64_lossy(beta2));
        let (one_b1, one_b2) = (F::from_f64_lossy(1.0 - beta1), F::from_f64_lossy(1.0 - beta2));
        let step_size = F::from_f64_lossy(lr / bc1);
        let inv_bc2_sqrt = F::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = F::from_f64_lossy(eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m).zip(v) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = vec![Tensor::<f64>::from_f64(vec![2], &[1.5, -2.0]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &p);
        st.step(&mut p, &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, before);
        assert!(st.first_moment[0].iter().all(|&m| m == 0.0));
        assert!(st.second_moment[0].iter().all(|&v| v == 0.0));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after one step, so Δ = −lr / (1 + ε)
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &p);
        st.step(&mut p, &[&[1.0]]).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = vec![Tensor::<f64>::zeros(vec![3])];
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &p);
        assert!(st.step(&mut p, &[&[1.0, 2.0]]).is_err());
        assert!(st.step(&mut p, &[]).is_err());
        assert_eq!(st.step, 0);
    }
}
