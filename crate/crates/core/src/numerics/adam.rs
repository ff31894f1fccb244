use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor2D>,
    v: Vec<Tensor2D>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. A non-finite gradient aborts before any
    /// parameter or moment is touched.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor2D]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::dim("adam update", params.len(), grads.len()));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.same_shape(params.get(i)) {
                return Err(Error::dim(
                    format!("gradient of `{}`", params.name(i)),
                    format!("{:?}", params.get(i).shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` at optimizer step {}",
                    params.name(i),
                    self.step + 1
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(i).data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
