//! Variance schedule and the closed-form forward (noising) process.
//!
//! Steps are 1-based: `t` ranges over `1..=T`, and `alpha_bar(0)` is defined
//! as 1 so the reverse process can be evaluated at `t = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Construction parameters, stored in configs and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams { steps: 1000, beta_start: 1e-6, beta_end: 1e-2 }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<Schedule> {
        linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if steps < 2 {
        return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let span = beta_end - beta_start;
    let last = (steps - 1) as f64;
    let beta: Vec<f64> = (0..steps)
        .map(|k| if k == steps - 1 { beta_end } else { beta_start + k as f64 / last * span })
        .collect();
    Schedule::from_betas(ScheduleParams { steps, beta_start, beta_end }, beta)
}

impl Schedule {
    fn from_betas(params: ScheduleParams, beta: Vec<f64>) -> Result<Self> {
        if beta.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("betas must be strictly increasing"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Schedule { params, beta, alpha, alpha_bar })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn marginal_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Standard deviation of the injected noise in the reverse step at `t`:
    /// `sqrt((1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t)`. Zero at `t = 1`.
    pub fn posterior_std(&self, t: usize) -> f64 {
        ((1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)).sqrt()
    }
}

/// `F_t = sqrt(ab_t) F_0 + sqrt(1 - ab_t) eps`. No clamping.
pub fn q_sample<F: Real>(f0: &[F], t: usize, eps: &[F], s: &Schedule) -> Result<Vec<F>> {
    s.check_step(t)?;
    if f0.len() != eps.len() {
        return Err(Error::shape(format!("noise has {} values, signal has {}", eps.len(), f0.len())));
    }
    let (a, b) = s.marginal_coefficients(t);
    let (a, b) = (F::real(a), F::real(b));
    Ok(f0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// One forward Markov step `F_t = sqrt(1 - beta_t) F_{t-1} + sqrt(beta_t) eps`.
pub fn chain_step<F: Real>(f_prev: &[F], t: usize, eps: &[F], s: &Schedule) -> Result<Vec<F>> {
    s.check_step(t)?;
    chain_step_with_beta(f_prev, s.beta(t), eps)
}

/// Forward Markov step for an explicit `beta` in `[0, 1]`.
pub fn chain_step_with_beta<F: Real>(f_prev: &[F], beta: f64, eps: &[F]) -> Result<Vec<F>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta {beta} outside [0, 1]")));
    }
    if f_prev.len() != eps.len() {
        return Err(Error::shape("noise and signal lengths differ"));
    }
    let a = F::real((1.0 - beta).sqrt());
    let b = F::real(beta.sqrt());
    Ok(f_prev.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}
