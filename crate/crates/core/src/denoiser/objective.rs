//! Noise-matching objective: mean squared error between injected and
//! predicted noise, with per-item timestep and noise draws.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::network::DenoiserParams;
use super::NoisePredictor;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::{q_sample, Schedule};
use crate::tensor::{Feat, Real};

/// Paired HR targets and their upsampled LR conditions.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub f0: Vec<Feat<F>>,
    pub cond: Vec<Feat<F>>,
}

impl<F: Real> Batch<F> {
    pub fn new(f0: Vec<Feat<F>>, cond: Vec<Feat<F>>) -> Result<Self> {
        if f0.len() != cond.len() {
            return Err(Error::shape(format!("{} targets but {} conditions", f0.len(), cond.len())));
        }
        if f0.iter().zip(&cond).any(|(a, b)| !a.same_shape(b) || a.c != 1) {
            return Err(Error::shape("targets and conditions must be equal-size single-channel maps"));
        }
        Ok(Batch { f0, cond })
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    fn pixel_count(&self) -> usize {
        self.f0.iter().map(|f| f.data.len()).sum()
    }
}

/// Timestep and noise drawn for one batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw<F> {
    pub t: usize,
    pub eps: Vec<F>,
}

/// Draw `t ~ U{1..T}` then `eps ~ N(0, I)` for each item in order.
pub fn sample_draws<F: Real>(batch: &Batch<F>, s: &Schedule, rng: &mut Rng) -> Vec<Draw<F>> {
    batch
        .f0
        .iter()
        .map(|f| {
            let t = rng.random_range(1..=s.steps());
            let eps = (0..f.data.len()).map(|_| F::real(rng.sample::<f64, _>(StandardNormal))).collect();
            Draw { t, eps }
        })
        .collect()
}

fn noised<F: Real>(f0: &Feat<F>, d: &Draw<F>, s: &Schedule) -> Result<Feat<F>> {
    Ok(Feat::from_vec(f0.c, f0.h, f0.w, q_sample(&f0.data, d.t, &d.eps, s)?))
}

fn check_draws<F>(batch: &Batch<F>, draws: &[Draw<F>]) -> Result<()> {
    if batch.f0.len() != draws.len() {
        return Err(Error::shape("one draw per batch item required"));
    }
    Ok(())
}

/// Loss value and the per-item predictions for fixed draws.
pub fn loss_with_draws<F: Real, P: NoisePredictor<F>>(
    model: &P,
    batch: &Batch<F>,
    draws: &[Draw<F>],
    s: &Schedule,
) -> Result<(f64, Vec<Feat<F>>)> {
    check_draws(batch, draws)?;
    let preds = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let ft = noised(&batch.f0[i], &draws[i], s)?;
            model.predict(&batch.cond[i], &ft, draws[i].t)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0f64;
    for (p, d) in preds.iter().zip(draws) {
        if p.data.len() != d.eps.len() {
            return Err(Error::shape("prediction size differs from noise size"));
        }
        sum += p.data.iter().zip(&d.eps).map(|(a, b)| (b.as_f64() - a.as_f64()).powi(2)).sum::<f64>();
    }
    Ok((sum / batch.pixel_count().max(1) as f64, preds))
}

#[derive(Clone, Debug)]
pub struct LossEval<F> {
    pub loss: f64,
    pub draws: Vec<Draw<F>>,
    pub eps_hat: Vec<Feat<F>>,
}

pub fn loss<F: Real, P: NoisePredictor<F>>(model: &P, batch: &Batch<F>, s: &Schedule, rng: &mut Rng) -> Result<LossEval<F>> {
    let draws = sample_draws(batch, s, rng);
    let (loss, eps_hat) = loss_with_draws(model, batch, &draws, s)?;
    Ok(LossEval { loss, draws, eps_hat })
}

/// Exact loss gradient for fixed draws. Items are differentiated
/// independently and summed in index order, so the result does not depend
/// on the thread count.
pub fn loss_and_grad_with_draws<F: Real>(
    params: &DenoiserParams<F>,
    batch: &Batch<F>,
    draws: &[Draw<F>],
    s: &Schedule,
) -> Result<(f64, Vec<F>)> {
    check_draws(batch, draws)?;
    let scale = 2.0 / batch.pixel_count().max(1) as f64;
    let per_item = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let ft = noised(&batch.f0[i], &draws[i], s)?;
            let (pred, cache) = params.forward_cached(&batch.cond[i], &ft, draws[i].t)?;
            let mut sq = 0.0f64;
            let mut dout = Feat::zeros(pred.c, pred.h, pred.w);
            for ((g, &p), &e) in dout.data.iter_mut().zip(&pred.data).zip(&draws[i].eps) {
                let r = p.as_f64() - e.as_f64();
                sq += r * r;
                *g = F::real(scale * r);
            }
            let mut grads = params.zeros_like();
            params.backward(&cache, &dout, &mut grads);
            Ok((sq, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for (sq, g) in per_item {
        total += sq;
        for (a, b) in grads.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((total / batch.pixel_count().max(1) as f64, grads))
}

/// Draw fresh `(t, eps)` and return the loss and its gradient. A non-finite
/// loss or gradient is reported as a training fault.
pub fn grad<F: Real>(params: &DenoiserParams<F>, batch: &Batch<F>, s: &Schedule, rng: &mut Rng, step: u64) -> Result<(f64, Vec<F>)> {
    let draws = sample_draws(batch, s, rng);
    let (l, g) = loss_and_grad_with_draws(params, batch, &draws, s)?;
    if !l.is_finite() {
        return Err(Error::TrainingFault { step, reason: format!("loss is {l}") });
    }
    if let Some(k) = g.iter().position(|v| !v.is_finite()) {
        let name = params
            .architecture()
            .entries()
            .iter()
            .find(|e| (e.slot.offset..e.slot.offset + e.slot.len).contains(&k))
            .map(|e| e.name.clone())
            .unwrap_or_default();
        return Err(Error::TrainingFault { step, reason: format!("non-finite gradient in {name} (index {k})") });
    }
    Ok((l, g))
}
