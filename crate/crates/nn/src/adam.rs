use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer state for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("sized"))
                .collect()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(NnError::ShapeMismatch {
                op: "adam_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (p, g) in params.tensors().iter().zip(grads) {
            if p.len() != g.len() {
                return Err(NnError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
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
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
