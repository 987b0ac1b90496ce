//! Noise schedule and the closed-form DDPM/DDIM updates.

use kvmix_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear-beta schedule with cumulative products kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.steps < 2 || !(0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Invalid(format!(
                "schedule needs steps >= 2 and 0 < beta_start <= beta_end < 1, got {cfg:?}"
            )));
        }
        let n = cfg.steps;
        let betas: Vec<f64> = (0..n)
            .map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(n);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::Timestep { t, max: self.len() })
    }

    /// Evenly spaced descending timesteps for a `steps`-step sampler.
    pub fn ddim_timesteps(&self, steps: usize) -> Vec<usize> {
        let steps = steps.clamp(1, self.len());
        let ratio = self.len() / steps;
        (0..steps).rev().map(|i| i * ratio).collect()
    }
}

/// `x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`.
pub fn q_sample(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    q_sample_with(ab, x0, eps)
}

pub fn q_sample_with(alpha_bar: f64, x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    Ok(x0.lincomb(alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt()))
}

/// Clean-image estimate before clamping.
pub fn predict_x0_raw(alpha_bar: f64, z_t: &Tensor, eps: &Tensor) -> Tensor {
    // One rounding: near the noisy end 1/sqrt(alpha_bar) is in the hundreds
    // and would magnify every intermediate one.
    let s = alpha_bar.sqrt();
    z_t.lincomb(1.0 / s, eps, -(1.0 - alpha_bar).sqrt() / s)
}

/// Clean-image estimate clamped to `[-1, 1]`.
pub fn predict_x0(schedule: &NoiseSchedule, z_t: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    Ok(predict_x0_raw(ab, z_t, eps).clamp(-1.0, 1.0))
}

pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f32) -> Tensor {
    eps_uncond.add(&eps_cond.sub(eps_uncond).scale(scale))
}

/// Deterministic DDIM update from `t` to `t_prev`; `None` is the clean end
/// of the chain.
pub fn ddim_step(schedule: &NoiseSchedule, z_t: &Tensor, t: usize, t_prev: Option<usize>, eps: &Tensor) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(tp) if tp > t => {
            return Err(Error::Invalid(format!("DDIM step must go backwards ({t} -> {tp})")));
        }
        Some(tp) => schedule.alpha_bar(tp)?,
        None => 1.0,
    };
    let x0 = predict_x0_raw(ab, z_t, eps).clamp(-1.0, 1.0);
    Ok(x0.lincomb(ab_prev.sqrt(), eps, (1.0 - ab_prev).sqrt()))
}
