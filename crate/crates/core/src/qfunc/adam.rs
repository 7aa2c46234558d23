use serde::{Deserialize, Serialize};

use super::{QEnsemble, QFuncError};

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(num_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        OptimizerState { lr, beta1, beta2, eps, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    /// Defaults: lr 0.001, decays 0.9 / 0.999, eps 0.01 / 32.
    pub fn with_defaults(num_params: usize) -> Self {
        Self::new(num_params, 1e-3, 0.9, 0.999, 0.01 / 32.0)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_params(&self) -> usize {
        self.m.len()
    }

    /// One update of `q` with gradient `grad`. Nothing changes on error.
    pub fn apply_update(&mut self, q: &mut QEnsemble, grad: &[f64]) -> Result<(), QFuncError> {
        if grad.len() != q.num_params() || grad.len() != self.m.len() {
            return Err(QFuncError::ShapeMismatch(format!(
                "gradient {} / optimizer {} / parameters {}",
                grad.len(),
                self.m.len(),
                q.num_params()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(QFuncError::NonFiniteGradient(i));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let params = q.params_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
