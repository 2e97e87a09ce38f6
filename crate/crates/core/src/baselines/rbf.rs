//! Radial basis function interpolation with an optional constant tail.
//!
//! Distances are in LR sample spacings. With `smoothing = 0` the interpolant
//! passes through every sample; if the system is numerically singular a
//! growing ridge term is tried instead.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{dist, sample_sites};
use crate::error::{Error, Result};
use crate::grid::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RbfKernel {
    /// `sqrt(r^2 + c^2)`
    Multiquadric { c: f64 },
    /// `1 / sqrt(r^2 + c^2)`
    InverseMultiquadric { c: f64 },
    /// `exp(-(eps r)^2)`
    Gaussian { eps: f64 },
}

impl Default for RbfKernel {
    fn default() -> Self {
        RbfKernel::Multiquadric { c: 1.0 }
    }
}

impl RbfKernel {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            RbfKernel::Multiquadric { c } => (r * r + c * c).sqrt(),
            RbfKernel::InverseMultiquadric { c } => 1.0 / (r * r + c * c).sqrt(),
            RbfKernel::Gaussian { eps } => (-(eps * r).powi(2)).exp(),
        }
    }

    fn validate(&self) -> Result<()> {
        let p = match *self {
            RbfKernel::Multiquadric { c } | RbfKernel::InverseMultiquadric { c } => c,
            RbfKernel::Gaussian { eps } => eps,
        };
        if p.is_finite() && p > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("RBF shape parameter must be positive, got {p}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbfConfig {
    pub kernel: RbfKernel,
    /// Ridge added to the kernel diagonal.
    pub smoothing: f64,
    /// Augment with a constant term constrained by `sum(w) = 0`.
    pub constant_tail: bool,
}

impl Default for RbfConfig {
    fn default() -> Self {
        RbfConfig { kernel: RbfKernel::default(), smoothing: 0.0, constant_tail: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbfDiagnostics {
    /// Ridge actually used.
    pub smoothing: f64,
    pub fallback_used: bool,
}

#[derive(Clone, Debug)]
pub struct RbfModel {
    centers: Vec<[f64; 2]>,
    weights: Vec<f64>,
    offset: f64,
    kernel: RbfKernel,
}

impl RbfModel {
    pub fn fit(centers: &[[f64; 2]], values: &[f64], cfg: &RbfConfig) -> Result<(Self, RbfDiagnostics)> {
        cfg.kernel.validate()?;
        if centers.is_empty() || centers.len() != values.len() {
            return Err(Error::invalid("RBF fit needs matching, non-empty centers and values"));
        }
        if !(cfg.smoothing >= 0.0) {
            return Err(Error::invalid("RBF smoothing must be non-negative"));
        }
        let n = centers.len();
        let m = n + usize::from(cfg.constant_tail);
        let mut base = DMatrix::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                base[(i, j)] = cfg.kernel.eval(dist(centers[i], centers[j]));
            }
            if cfg.constant_tail {
                base[(i, n)] = 1.0;
                base[(n, i)] = 1.0;
            }
        }
        let mut rhs = DVector::zeros(m);
        rhs.as_mut_slice()[..n].copy_from_slice(values);
        let scale = (0..n).map(|i| base[(i, i)].abs()).fold(0.0, f64::max).max(1.0);

        let mut ladder = vec![cfg.smoothing];
        ladder.extend((2..=12).rev().map(|k| cfg.smoothing.max(scale * 10f64.powi(-k))));
        for (step, &lambda) in ladder.iter().enumerate() {
            let mut a = base.clone();
            for i in 0..n {
                a[(i, i)] += lambda;
            }
            let Some(x) = a.clone().lu().solve(&rhs) else { continue };
            if !x.iter().all(|v| v.is_finite()) || (&a * &x - &rhs).norm() > 1e-8 * rhs.norm().max(1.0) {
                continue;
            }
            let offset = if cfg.constant_tail { x[n] } else { 0.0 };
            let model = RbfModel { centers: centers.to_vec(), weights: x.as_slice()[..n].to_vec(), offset, kernel: cfg.kernel };
            return Ok((model, RbfDiagnostics { smoothing: lambda, fallback_used: step > 0 }));
        }
        Err(Error::Validation("RBF system is singular even after regularization".into()))
    }

    pub fn eval(&self, p: [f64; 2]) -> f64 {
        self.centers.iter().zip(&self.weights).map(|(c, w)| w * self.kernel.eval(dist(*c, p))).sum::<f64>()
            + self.offset
    }
}

pub fn rbf_upsample(lr: &Raster, factor: usize, cfg: &RbfConfig) -> Result<(Raster, RbfDiagnostics)> {
    if factor == 0 {
        return Err(Error::invalid("scale factor must be positive"));
    }
    let centers = sample_sites(lr.side());
    let (model, diag) = RbfModel::fit(&centers, lr.as_slice(), cfg)?;
    let f = factor as f64;
    Ok((Raster::from_fn(lr.side() * factor, |y, x| model.eval([y as f64 / f, x as f64 / f])), diag))
}
