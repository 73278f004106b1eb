//! Adam with bias correction.

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = first.clone();
        Self {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One update. A missing gradient counts as zero. Nothing is modified
    /// when any gradient is non-finite.
    pub fn step(
        &mut self,
        names: &[String],
        params: &mut [&mut Tensor],
        grads: &[Option<&Tensor>],
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() || names.len() != params.len() {
            return shape_err(
                "adam_step",
                format!(
                    "{} params, {} grads, {} names for {} slots",
                    params.len(),
                    grads.len(),
                    names.len(),
                    self.first.len()
                ),
            );
        }
        for ((name, p), g) in names.iter().zip(params.iter()).zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return shape_err("adam_step", format!("gradient shape for {name}"));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
