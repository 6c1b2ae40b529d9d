//! AdamW with decoupled weight decay and the linear warmup/decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::GradientMap;
use crate::model::ModelParameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-model optimizer state. Each trained model owns exactly one; frozen
/// models have none at all.
#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step_count: u64,
    pub hyper: AdamWHyper,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ModelParameters<S>, hyper: AdamWHyper) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        OptimizerState { m, v, step_count: 0, hyper }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One decoupled-weight-decay update. Parameters with a gradient entry
    /// get the full Adam step plus decay; parameters without one get only
    /// the decay term (their moments are untouched).
    pub fn step(
        &mut self,
        params: &mut ModelParameters<S>,
        grads: &GradientMap<S>,
        prefix: &str,
        lr: f64,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t as i32);
        let bc2 = 1.0 - h.beta2.powi(t as i32);

        let lr_s = S::from_f64(lr);
        let beta1 = S::from_f64(h.beta1);
        let beta2 = S::from_f64(h.beta2);
        let one_m_beta1 = S::from_f64(1.0 - h.beta1);
        let one_m_beta2 = S::from_f64(1.0 - h.beta2);
        let inv_bc1 = S::from_f64(1.0 / bc1);
        let inv_bc2 = S::from_f64(1.0 / bc2);
        let eps = S::from_f64(h.eps);
        let wd = S::from_f64(h.weight_decay);
        let decay_factor = S::one() - lr_s * wd;

        for i in 0..params.len() {
            let name = format!("{}{}", prefix, params.name_at(i));
            match grads.get(&name) {
                Some(g) => {
                    if !g.all_finite() {
                        return Err(CoreError::NonFinite { op: "adamw_step" });
                    }
                    if g.shape() != params.tensor_at(i).shape() {
                        return Err(CoreError::ShapeMismatch {
                            op: "adamw_step",
                            detail: format!("gradient shape for `{}`", name),
                        });
                    }
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    let theta = params.tensor_at_mut(i).data_mut();
                    for (((p, g), m), v) in theta.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + one_m_beta1 * *g;
                        *v = beta2 * *v + one_m_beta2 * *g * *g;
                        let m_hat = *m * inv_bc1;
                        let v_hat = *v * inv_bc2;
                        *p = *p - lr_s * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                    }
                }
                None => {
                    for p in params.tensor_at_mut(i).data_mut() {
                        *p = *p * decay_factor;
                    }
                }
            }
            if !params.tensor_at(i).all_finite() {
                return Err(CoreError::NonFinite { op: "adamw_step" });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecaySchedule {
    /// Linear decay from the peak to zero at the last step.
    LinearToZero,
    /// Hold the peak after warmup.
    Constant,
}

/// Linear ramp from zero to the peak over the first
/// `ceil(warmup_fraction * total)` steps, then the configured decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub decay: DecaySchedule,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "warmup fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if self.total_steps == 0 {
            return Err(CoreError::InvalidConfig("total steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).ceil() as u64
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(CoreError::StepOutOfRange { step, total: self.total_steps });
        }
        let warmup = self.warmup_steps().max(1);
        if step <= warmup {
            return Ok(self.peak * step as f64 / warmup as f64);
        }
        match self.decay {
            DecaySchedule::Constant => Ok(self.peak),
            DecaySchedule::LinearToZero => {
                let remaining = (self.total_steps - step) as f64;
                let span = (self.total_steps - warmup) as f64;
                Ok(self.peak * remaining / span)
            }
        }
    }
}
