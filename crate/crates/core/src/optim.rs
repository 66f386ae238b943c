//! Client optimizers and the round-indexed learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, axpy, norm, Batch, MlpSpec, ParamVector};

/// `params - lr * gradient`
pub fn sgd_step(params: &[f64], gradient: &[f64], lr: f64) -> ParamVector {
    let mut out = params.to_vec();
    axpy(-lr, gradient, &mut out);
    ParamVector::new(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub rho: f64,
    pub base_lr: f64,
}

impl SamConfig {
    pub fn new(rho: f64, base_lr: f64) -> Result<Self> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::invalid(format!("SAM rho must be finite and >= 0, got {rho}")));
        }
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and > 0, got {base_lr}")));
        }
        Ok(Self { rho, base_lr })
    }
}

/// Two-step sharpness-aware update driven by an arbitrary gradient oracle.
///
/// The ascent point is `params + rho * g / ||g||` and the descent step uses
/// the gradient evaluated there. A zero gradient (or `rho == 0`) reduces to a
/// plain SGD step with the base-point gradient.
pub fn sam_step_with<F>(params: &[f64], cfg: &SamConfig, mut grad_fn: F) -> Result<ParamVector>
where
    F: FnMut(&[f64]) -> Result<ParamVector>,
{
    let g = grad_fn(params)?;
    let gn = norm(&g);
    if gn == 0.0 || cfg.rho == 0.0 {
        return Ok(sgd_step(params, &g, cfg.base_lr));
    }
    let mut perturbed = params.to_vec();
    axpy(cfg.rho / gn, &g, &mut perturbed);
    let g_adv = grad_fn(&perturbed)?;
    Ok(sgd_step(params, &g_adv, cfg.base_lr))
}

/// SAM step on the model's own mean loss over `batch`.
pub fn sam_step(spec: &MlpSpec, params: &[f64], batch: &Batch, cfg: &SamConfig) -> Result<ParamVector> {
    sam_step_with(params, cfg, |p| nn::grad(spec, p, batch))
}

/// Piecewise-constant schedule: `base_lr` before the SWA start round,
/// `swa_lr` from it onwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub swa_lr: f64,
    pub swa_start_round: usize,
    pub total_rounds: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, swa_lr: f64, swa_start_round: usize, total_rounds: usize) -> Result<Self> {
        if swa_start_round > total_rounds {
            return Err(Error::invalid(format!(
                "SWA start round {swa_start_round} exceeds total rounds {total_rounds}"
            )));
        }
        Ok(Self {
            base_lr,
            swa_lr,
            swa_start_round,
            total_rounds,
        })
    }

    pub fn lr_at_round(&self, round: usize) -> Result<f64> {
        if round >= self.total_rounds {
            return Err(Error::invalid(format!(
                "round {round} outside schedule of {} rounds",
                self.total_rounds
            )));
        }
        Ok(if round < self.swa_start_round {
            self.base_lr
        } else {
            self.swa_lr
        })
    }
}

pub fn lr_at_round(sched: &LrSchedule, round: usize) -> Result<f64> {
    sched.lr_at_round(round)
}
