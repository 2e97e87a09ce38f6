//! Training loop: draw a mini-batch, noise it, take an Adam step, update the
//! weight average. Runs for a fixed step budget with an optional plateau stop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::objective::{grad, Batch};
use super::optim::{adam_step, ema_update, AdamConfig, EmaConfig, TrainState};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::schedule::Schedule;
use crate::tensor::Feat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    /// Steps per comparison window.
    pub window: usize,
    /// Stop when the mean loss of the latest window improves on the one
    /// before it by less than this fraction.
    pub min_rel_improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub ema: EmaConfig,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub plateau: Option<PlateauConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500_000,
            batch_size: 16,
            adam: AdamConfig::default(),
            ema: EmaConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            plateau: None,
        }
    }
}

/// Receives progress from `train`.
pub trait TrainObserver {
    fn on_step(&mut self, _step: u64, _loss: f64) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub stopped_on_plateau: bool,
}

/// Train `state` in place on `(target, condition)` pairs.
///
/// On a training fault the state is left at the last good step and the error
/// is returned.
pub fn train(
    pairs: &[(Feat<f32>, Feat<f32>)],
    schedule: &Schedule,
    state: &mut TrainState,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if cfg.steps > 0 && pairs.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut order_rng = rng_from_seed(derive_seed(cfg.seed, 0));
    let mut noise_rng = rng_from_seed(derive_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut stopped_on_plateau = false;

    for _ in 0..cfg.steps {
        let mut f0 = Vec::with_capacity(cfg.batch_size);
        let mut cond = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let (x, c) = &pairs[order[cursor]];
            cursor += 1;
            f0.push(x.clone());
            cond.push(c.clone());
        }
        let batch = Batch::new(f0, cond)?;
        let (loss, g) = grad(&state.params, &batch, schedule, &mut noise_rng, state.step + 1)?;
        adam_step(state, &g)?;
        if !state.params.all_finite() {
            return Err(Error::TrainingFault { step: state.step, reason: "parameters became non-finite".into() });
        }
        ema_update(state);
        losses.push(loss);
        observer.on_step(state.step, loss)?;
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
            observer.on_checkpoint(state)?;
        }
        if let Some(p) = cfg.plateau {
            if plateaued(&losses, p) {
                stopped_on_plateau = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { losses, stopped_on_plateau })
}

fn plateaued(losses: &[f64], p: PlateauConfig) -> bool {
    let w = p.window.max(1);
    if losses.len() < 2 * w || !losses.len().is_multiple_of(w) {
        return false;
    }
    let n = losses.len();
    let recent = losses[n - w..].iter().sum::<f64>() / w as f64;
    let before = losses[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
    before - recent < p.min_rel_improvement * before
}

/// Trailing moving average of width `window`; entry `k` averages
/// `losses[k+1-window ..= k]` (fewer at the start).
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for (k, &v) in losses.iter().enumerate() {
        acc += v;
        if k >= w {
            acc -= losses[k - w];
        }
        out.push(acc / (k + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing() {
        let s = smoothed(&[1.0, 3.0, 5.0, 7.0], 2);
        assert_eq!(s, vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(smoothed(&[], 3), Vec::<f64>::new());
    }

    #[test]
    fn plateau_detection() {
        let p = PlateauConfig { window: 2, min_rel_improvement: 0.1 };
        assert!(!plateaued(&[1.0, 1.0, 0.5, 0.5], p));
        assert!(plateaued(&[1.0, 1.0, 0.95, 0.95], p));
        assert!(!plateaued(&[1.0, 1.0, 0.95], p));
    }
}
