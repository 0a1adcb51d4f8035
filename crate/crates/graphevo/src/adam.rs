//! Adam optimizer with bias correction, one state per parameter matrix.

use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("gradient shape {grad_rows}x{grad_cols} does not match parameter shape {param_rows}x{param_cols}")]
    ShapeMismatch { param_rows: usize, param_cols: usize, grad_rows: usize, grad_cols: usize },
    #[error("non-finite gradient entry at ({row},{col}): {value}")]
    NonFiniteGradient { row: usize, col: usize, value: f64 },
}

/// Adam hyper-parameters. Defaults are the customary 0.9 / 0.999 moments;
/// adversarial training overrides `beta1` downward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter optimizer state: first and second gradient moments plus the
/// step counter that drives bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: Matrix,
    v: Matrix,
    step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        AdamState { config, m: Matrix::zeros(rows, cols), v: Matrix::zeros(rows, cols), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One Adam update, in place:
    /// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`, then
    /// `p ← p − lr · m̂ / (√v̂ + ε)` with bias-corrected `m̂ = m/(1−β₁ᵗ)`,
    /// `v̂ = v/(1−β₂ᵗ)`. Rejects non-finite gradients before touching state.
    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix) -> Result<(), AdamError> {
        if param.shape() != grad.shape() {
            return Err(AdamError::ShapeMismatch {
                param_rows: param.rows(),
                param_cols: param.cols(),
                grad_rows: grad.rows(),
                grad_cols: grad.cols(),
            });
        }
        for i in 0..grad.rows() {
            for (j, &g) in grad.row(i).iter().enumerate() {
                if !g.is_finite() {
                    return Err(AdamError::NonFiniteGradient { row: i, col: j, value: g });
                }
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for idx in 0..param.len() {
            let g = grad.data()[idx];
            let m = &mut self.m.data_mut()[idx];
            *m = beta1 * *m + (1.0 - beta1) * g;
            let m_hat = *m / bc1;
            let v = &mut self.v.data_mut()[idx];
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let v_hat = *v / bc2;
            param.data_mut()[idx] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}
