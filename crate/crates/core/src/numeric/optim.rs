use std::f64::consts::PI;

use super::params::ParamStore;
use crate::error::{Result, UifmError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamW {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        AdamW { weight_decay, ..Default::default() }
    }

    /// One AdamW update of every parameter from its accumulated gradient.
    ///
    /// Decay is applied to the parameter directly (`θ ← θ − lr·λ·θ`) before
    /// the bias-corrected moment step, and only to parameters flagged for
    /// decay.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(UifmError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        store.step += 1;
        let t = store.step as i32;
        let bc1 = T::lit(1.0 - self.beta1.powi(t));
        let bc2 = T::lit(1.0 - self.beta2.powi(t));
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps, lr_t) = (T::one(), T::lit(self.eps), T::lit(lr));
        let shrink = T::lit(1.0 - lr * self.weight_decay);
        for p in store.iter_mut() {
            let decay = p.decay && self.weight_decay != 0.0;
            let values = p.value.data_mut();
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for (i, &g) in p.grad.data().iter().enumerate() {
                if decay {
                    values[i] *= shrink;
                }
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: usize, warmup_steps: usize, total_steps: usize, peak_lr: f64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(UifmError::InvalidArgument(format!(
            "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(UifmError::InvalidArgument(format!("step {step} beyond total_steps {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(peak_lr);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
}
