use serde::{Deserialize, Serialize};

use super::{Gradients, NumError, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2.0e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state, one pair of accumulators per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), NumError> {
        if grads.params.len() != params.len() || self.m.len() != params.len() {
            return Err(NumError::Shape {
                node: "optimizer".into(),
                detail: format!(
                    "{} params, {} gradients, {} moments",
                    params.len(),
                    grads.params.len(),
                    self.m.len()
                ),
            });
        }
        for (i, (p, g)) in params.tensors().iter().zip(&grads.params).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(NumError::Shape {
                    node: format!("param '{}'", params.names()[i]),
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads.params[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            }
            let m = self.m[i].data();
            let v = self.v[i].data();
            for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                *pj -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
