//! Conditional reverse diffusion: `T` refinement steps from Gaussian noise to
//! an HR EnvCF estimate, guided by the upsampled LR raster.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{condition_input, feat_to_raster, NoisePredictor};
use crate::error::{Error, Result};
use crate::grid::{EnvCf, GridSpec, Role};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::schedule::Schedule;
use crate::tensor::{Feat, Real};

/// `F_0 ≈ (F_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`. No clamping.
pub fn predict_x0<F: Real>(f_t: &[F], eps_hat: &[F], t: usize, s: &Schedule) -> Result<Vec<F>> {
    s.check_step(t)?;
    if f_t.len() != eps_hat.len() {
        return Err(Error::shape("noise estimate and state differ in size"));
    }
    let (a, b) = s.marginal_coefficients(t);
    let (inv_a, b) = (F::real(1.0 / a), F::real(b));
    Ok(f_t.iter().zip(eps_hat).map(|(&x, &e)| (x - b * e) * inv_a).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct SampleOptions {
    /// Clamp the implied `F_0` estimate to `[0, 1]` at every step and use the
    /// posterior-mean form of the update.
    pub clamp_x0: bool,
}


/// Coefficients of one reverse step at `t`:
/// `(1/sqrt(alpha_t), (1 - alpha_t)/sqrt(1 - ab_t), noise std)`.
pub fn step_coefficients(s: &Schedule, t: usize) -> (f64, f64, f64) {
    let alpha = s.alpha(t);
    ((1.0 / alpha.sqrt()), (1.0 - alpha) / (1.0 - s.alpha_bar(t)).sqrt(), s.posterior_std(t))
}

/// Deterministic part of the reverse update plus `noise_std * noise`.
pub fn reverse_update<F: Real>(
    f_t: &[F],
    eps_hat: &[F],
    noise: Option<&[F]>,
    t: usize,
    s: &Schedule,
    opts: SampleOptions,
) -> Result<Vec<F>> {
    s.check_step(t)?;
    if f_t.len() != eps_hat.len() || noise.is_some_and(|n| n.len() != f_t.len()) {
        return Err(Error::shape("reverse step operands differ in size"));
    }
    let (inv_sqrt_alpha, eps_coef, sigma) = step_coefficients(s, t);
    let mut out = if opts.clamp_x0 {
        let x0 = predict_x0(f_t, eps_hat, t, s)?;
        let ab_prev = s.alpha_bar(t - 1);
        let ab = s.alpha_bar(t);
        let c0 = F::real(ab_prev.sqrt() * s.beta(t) / (1.0 - ab));
        let ct = F::real(s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab));
        x0.iter()
            .zip(f_t)
            .map(|(&x, &ft)| c0 * x.max(F::zero()).min(F::one()) + ct * ft)
            .collect::<Vec<F>>()
    } else {
        let (a, c) = (F::real(inv_sqrt_alpha), F::real(eps_coef));
        f_t.iter().zip(eps_hat).map(|(&x, &e)| a * (x - c * e)).collect()
    };
    if let Some(noise) = noise {
        if t > 1 {
            let sig = F::real(sigma);
            for (o, &z) in out.iter_mut().zip(noise) {
                *o += sig * z;
            }
        }
    }
    Ok(out)
}

fn gaussian<F: Real>(n: usize, rng: &mut Rng) -> Vec<F> {
    (0..n).map(|_| F::real(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// One conditional refinement step `F_t -> F_{t-1}`. Noise is drawn only for
/// `t > 1`.
pub fn ddpm_step<F: Real, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    f_t: &Feat<F>,
    t: usize,
    cond: &Feat<F>,
    s: &Schedule,
    rng: &mut Rng,
    opts: SampleOptions,
) -> Result<Feat<F>> {
    let eps_hat = model.predict(cond, f_t, t)?;
    let noise = (t > 1).then(|| gaussian::<F>(f_t.data.len(), rng));
    let next = reverse_update(&f_t.data, &eps_hat.data, noise.as_deref(), t, s, opts)?;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::SamplingFault { t, reason: "non-finite value in reverse chain".into() });
    }
    Ok(Feat::from_vec(f_t.c, f_t.h, f_t.w, next))
}

/// Run the full chain from `F_T ~ N(0, I)` and return the raw final state.
/// `on_step` sees `F_{t-1}` after each step.
pub fn run_chain<F: Real, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    cond: &Feat<F>,
    s: &Schedule,
    rng: &mut Rng,
    opts: SampleOptions,
    on_step: &mut dyn FnMut(usize, &Feat<F>) -> Result<()>,
) -> Result<Feat<F>> {
    let mut x = Feat::from_vec(1, cond.h, cond.w, gaussian::<F>(cond.data.len(), rng));
    for t in (1..=s.steps()).rev() {
        x = ddpm_step(model, &x, t, cond, s, rng, opts)?;
        on_step(t - 1, &x)?;
    }
    Ok(x)
}

/// HR estimate for one LR EnvCF; output clamped to `[0, 1]`.
pub fn sample<F: Real, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    f_lr: &EnvCf,
    factor: usize,
    s: &Schedule,
    seed: u64,
    opts: SampleOptions,
) -> Result<EnvCf> {
    sample_with_snapshots::<F, P>(model, f_lr, factor, s, seed, opts, &mut |_, _| Ok(()))
}

pub fn sample_with_snapshots<F: Real, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    f_lr: &EnvCf,
    factor: usize,
    s: &Schedule,
    seed: u64,
    opts: SampleOptions,
    on_step: &mut dyn FnMut(usize, &Feat<F>) -> Result<()>,
) -> Result<EnvCf> {
    if factor == 0 {
        return Err(Error::invalid("scale factor must be positive"));
    }
    let cond: Feat<F> = condition_input(f_lr.pixels(), factor);
    let mut rng = rng_from_seed(seed);
    let out = run_chain(model, &cond, s, &mut rng, opts, on_step)?;
    let clamped = out.data.iter().map(|v| v.max(F::zero()).min(F::one())).collect();
    let raster = feat_to_raster(&Feat::from_vec(1, out.h, out.w, clamped))?;
    let grid = GridSpec::new(f_lr.grid().area_side_m(), f_lr.side() * factor)?;
    EnvCf::new(grid, raster, Role::Hr)
}

/// Sample every input with seed `derive_seed(seed, i)`; parallel over items,
/// identical to serial execution.
pub fn sample_batch<F: Real, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    inputs: &[EnvCf],
    factor: usize,
    s: &Schedule,
    seed: u64,
    opts: SampleOptions,
) -> Result<Vec<EnvCf>> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, lr)| sample::<F, P>(model, lr, factor, s, derive_seed(seed, i as u64), opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, Raster};
    use crate::schedule::{linear_schedule, q_sample};
    use proptest::prelude::*;

    fn toy() -> Schedule {
        linear_schedule(3, 0.1, 0.3).unwrap()
    }

    #[test]
    fn predict_x0_cases() {
        let s = toy();
        // x_t = sqrt(0.504) + sqrt(0.496) is q_sample of f0 = 1 with eps = 1.
        let x_t = 0.504f64.sqrt() + 0.496f64.sqrt();
        let x = predict_x0(&[x_t], &[1.0], 3, &s).unwrap()[0];
        assert!((x - 1.0).abs() < 1e-12);
        let y = predict_x0(&[0.7f64], &[0.0], 2, &s).unwrap()[0];
        assert_eq!(y, 0.7 / s.alpha_bar(2).sqrt());
        assert!(predict_x0(&[0.0f64], &[0.0], 0, &s).is_err());
    }

    #[test]
    fn first_step_has_zero_noise_coefficient() {
        let s = linear_schedule(1000, 1e-6, 1e-2).unwrap();
        assert_eq!(step_coefficients(&s, 1).2, 0.0);
        let x = [0.3f64, 0.9];
        let e = [0.1f64, -0.2];
        let a = reverse_update(&x, &e, Some(&[5.0, 5.0]), 1, &s, SampleOptions::default()).unwrap();
        let b = reverse_update(&x, &e, None, 1, &s, SampleOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_prediction_rescales() {
        let s = toy();
        let x = [0.5f64, -1.0];
        let out = reverse_update(&x, &[0.0, 0.0], None, 2, &s, SampleOptions::default()).unwrap();
        for (o, v) in out.iter().zip(x) {
            assert!((o - v / s.alpha(2).sqrt()).abs() < 1e-15);
        }
    }

    struct Zero;
    impl NoisePredictor<f32> for Zero {
        fn predict(&self, _c: &Feat<f32>, f_t: &Feat<f32>, _t: usize) -> Result<Feat<f32>> {
            Ok(Feat::zeros(f_t.c, f_t.h, f_t.w))
        }
    }

    fn lr_map() -> EnvCf {
        EnvCf::new(make_grid(16.0, 4).unwrap(), Raster::from_fn(4, |i, j| (i + j) as f64 / 6.0), Role::Lr).unwrap()
    }

    #[test]
    fn sample_shape_and_determinism() {
        let s = linear_schedule(5, 0.01, 0.2).unwrap();
        let a = sample::<f32, _>(&Zero, &lr_map(), 4, &s, 9, SampleOptions::default()).unwrap();
        let b = sample::<f32, _>(&Zero, &lr_map(), 4, &s, 9, SampleOptions::default()).unwrap();
        let c = sample::<f32, _>(&Zero, &lr_map(), 4, &s, 10, SampleOptions::default()).unwrap();
        assert_eq!(a.side(), 16);
        assert_eq!(a.role(), Role::Hr);
        assert_eq!(a.grid().area_side_m(), 16.0);
        assert_eq!(a, b);
        assert_ne!(a.pixels(), c.pixels());
        assert!(a.pixels().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn batch_matches_individual_calls() {
        let s = linear_schedule(4, 0.01, 0.2).unwrap();
        let inputs = vec![lr_map(), lr_map()];
        let out = sample_batch::<f32, _>(&Zero, &inputs, 2, &s, 77, SampleOptions::default()).unwrap();
        for (i, o) in out.iter().enumerate() {
            let single = sample::<f32, _>(&Zero, &inputs[i], 2, &s, derive_seed(77, i as u64), SampleOptions::default()).unwrap();
            assert_eq!(o, &single);
        }
        assert_ne!(out[0], out[1]);
        assert!(sample_batch::<f32, _>(&Zero, &[], 2, &s, 77, SampleOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn clamped_update_matches_plain_form_inside_range() {
        let s = toy();
        let x0 = [0.2f64, 0.8];
        let eps = [0.3f64, -0.4];
        let ft = q_sample(&x0, 2, &eps, &s).unwrap();
        let plain = reverse_update(&ft, &eps, None, 2, &s, SampleOptions::default()).unwrap();
        let clamped = reverse_update(&ft, &eps, None, 2, &s, SampleOptions { clamp_x0: true }).unwrap();
        for (a, b) in plain.iter().zip(&clamped) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn x0_inverts_marginal(t in 1usize..=1000, x in -1.0f64..2.0, e in -4.0f64..4.0) {
            let s = linear_schedule(1000, 1e-6, 1e-2).unwrap();
            let ft = q_sample(&[x], t, &[e], &s).unwrap();
            let back = predict_x0(&ft, &[e], t, &s).unwrap()[0];
            prop_assert!((back - x).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }
}
