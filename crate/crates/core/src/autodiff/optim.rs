//! Adam with bias correction, and the linear warmup / linear decay schedule.

use crate::error::{contract, Result};
use crate::scalar::Scalar;

use super::param::Parameter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies one Adam update to every parameter in `params` using its stored `grad`.
pub fn adam_step<'a, T, I>(params: I, lr: T, cfg: AdamConfig) -> Result<()>
where
    T: Scalar,
    I: IntoIterator<Item = &'a mut Parameter<T>>,
{
    let (b1, b2, eps) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.eps));
    for p in params {
        let Some(grad) = p.grad.as_ref() else {
            return Err(contract(format!("parameter `{}` has no gradient", p.name)));
        };
        p.step_count += 1;
        let t = i32::try_from(p.step_count).unwrap_or(i32::MAX);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = grad[i];
            p.adam_m[i] = b1 * p.adam_m[i] + (T::one() - b1) * g;
            p.adam_v[i] = b2 * p.adam_v[i] + (T::one() - b2) * g * g;
            let m_hat = p.adam_m[i] / c1;
            let v_hat = p.adam_v[i] / c2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Learning rate at `step` of `total_steps`: linear ramp from 0 to `base_lr`
/// over the first `warmup_fraction` of the run, then linear decay to 0.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if step > total_steps {
        return Err(contract(format!("step {step} beyond total {total_steps}")));
    }
    if !(0.0..=1.0).contains(&warmup_fraction) {
        return Err(contract(format!("warmup fraction {warmup_fraction} outside [0,1]")));
    }
    let (s, total) = (step as f64, total_steps as f64);
    let warmup = warmup_fraction * total;
    if s < warmup {
        return Ok(base_lr * s / warmup);
    }
    if total <= warmup {
        return Ok(base_lr);
    }
    Ok(base_lr * (total - s) / (total - warmup))
}
