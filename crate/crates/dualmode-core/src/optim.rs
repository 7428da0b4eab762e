//! Tri-stage learning-rate schedule and AdamW.
//!
//! The schedule ramps linearly from 0 to the peak, holds, then decays
//! exponentially so the final step lands exactly on `decay_floor * peak`.
//! AdamW keeps first/second moment state per parameter tensor and supports a
//! per-coordinate skip set: skipped coordinates receive no parameter update,
//! no moment update, and no weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrConfig {
    pub peak: f64,
    pub warmup_frac: f64,
    pub hold_frac: f64,
    pub decay_floor: f64,
}

impl LrConfig {
    pub fn new(peak: f64, warmup_frac: f64, hold_frac: f64, decay_floor: f64) -> Result<Self> {
        let cfg = LrConfig { peak, warmup_frac, hold_frac, decay_floor };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0) || !self.peak.is_finite() {
            return Err(Error::Config(format!("lr peak {} must be finite and > 0", self.peak)));
        }
        if self.warmup_frac < 0.0 || self.hold_frac < 0.0 {
            return Err(Error::Config("lr fractions must be non-negative".into()));
        }
        if self.warmup_frac + self.hold_frac > 1.0 {
            return Err(Error::Config(format!(
                "lr warmup_frac {} + hold_frac {} exceeds 1",
                self.warmup_frac, self.hold_frac
            )));
        }
        if !(self.decay_floor > 0.0 && self.decay_floor <= 1.0) {
            return Err(Error::Config(format!(
                "lr decay_floor {} must be in (0, 1]",
                self.decay_floor
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step` of a run with `total` optimizer steps.
///
/// Piecewise: step/warmup ramp, flat hold at the peak, then exponential decay
/// reaching exactly `decay_floor * peak` at `step == total`.
pub fn lr_at(step: usize, total: usize, cfg: &LrConfig) -> Result<f64> {
    cfg.validate()?;
    if total == 0 {
        return Err(Error::Schedule("lr schedule needs total >= 1".into()));
    }
    if step > total {
        return Err(Error::Schedule(format!("lr step {step} beyond total {total}")));
    }
    let warmup = (cfg.warmup_frac * total as f64).floor() as usize;
    let hold_end = warmup + (cfg.hold_frac * total as f64).floor() as usize;
    if step < warmup {
        return Ok(cfg.peak * step as f64 / warmup as f64);
    }
    if step <= hold_end || hold_end == total {
        return Ok(cfg.peak);
    }
    let frac = (step - hold_end) as f64 / (total - hold_end) as f64;
    Ok(cfg.peak * cfg.decay_floor.powf(frac))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-tensor coordinate skip sets; `Some(bits)` marks coordinates to freeze.
pub type SkipSet = Vec<Option<Vec<bool>>>;

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        AdamW {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all tensors; `grads` and `skip` align with `params`.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Vec<f64>],
        lr: f64,
        skip: Option<&SkipSet>,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(
                "adamw",
                format!(
                    "expected {} tensors, got {} params / {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (p, ((param, grad), (m, v))) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .enumerate()
        {
            let data = param.data_mut();
            if data.len() != m.len() || grad.len() != m.len() {
                return Err(Error::dim(
                    "adamw",
                    format!("tensor {p}: state len {} vs param {} / grad {}", m.len(), data.len(), grad.len()),
                ));
            }
            let skip_bits = skip.and_then(|s| s.get(p).and_then(|o| o.as_deref()));
            if let Some(bits) = skip_bits {
                if bits.len() != data.len() {
                    return Err(Error::dim(
                        "adamw",
                        format!("tensor {p}: skip len {} vs param {}", bits.len(), data.len()),
                    ));
                }
            }
            for i in 0..data.len() {
                if skip_bits.is_some_and(|b| b[i]) {
                    continue;
                }
                let g = grad[i];
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "adamw_grad" });
                }
                data[i] -= lr * self.cfg.weight_decay * data[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
