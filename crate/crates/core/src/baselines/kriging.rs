//! Ordinary kriging with a fitted exponential variogram.
//!
//! Distances are measured in LR sample spacings so the configuration does not
//! depend on the scale factor. The system is solved in covariance form; a
//! nugget enters as extra variance on the diagonal, so with zero nugget the
//! interpolant is exact at the samples.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{dist, sample_sites};
use crate::error::{Error, Result};
use crate::grid::Raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariogramConfig {
    /// Number of lag bins for the empirical variogram.
    pub n_bins: usize,
    /// Largest lag considered, as a fraction of the largest sample distance.
    pub max_lag_fraction: f64,
    /// Nugget used when `fit_nugget` is off.
    pub nugget: f64,
    /// Fit the nugget alongside the sill instead of fixing it.
    pub fit_nugget: bool,
    /// Nearest-neighbour count for local kriging; `None` solves one global
    /// system.
    pub neighbors: Option<usize>,
}

impl Default for VariogramConfig {
    fn default() -> Self {
        VariogramConfig { n_bins: 15, max_lag_fraction: 0.5, nugget: 0.0, fit_nugget: false, neighbors: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentialVariogram {
    /// Partial sill.
    pub sill: f64,
    pub range: f64,
    pub nugget: f64,
}

impl ExponentialVariogram {
    pub fn gamma(&self, h: f64) -> f64 {
        if h == 0.0 {
            0.0
        } else {
            self.nugget + self.sill * (1.0 - (-h / self.range).exp())
        }
    }

    /// Covariance of the continuous part.
    pub fn cov(&self, h: f64) -> f64 {
        self.sill * (-h / self.range).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KrigingDiagnostics {
    pub variogram: ExponentialVariogram,
    /// Diagonal regularization added by the fallback ladder, zero if unused.
    pub added_nugget: f64,
    pub fallback_used: bool,
}

/// Binned empirical semivariogram: `(mean lag, semivariance, pair count)` for
/// each non-empty bin.
pub fn empirical_variogram(points: &[[f64; 2]], values: &[f64], n_bins: usize, max_lag: f64) -> Vec<(f64, f64, usize)> {
    let mut sum_h = vec![0.0; n_bins];
    let mut sum_g = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let h = dist(points[i], points[j]);
            if h > max_lag || h == 0.0 {
                continue;
            }
            let b = ((h / max_lag) * n_bins as f64).min(n_bins as f64 - 1.0) as usize;
            sum_h[b] += h;
            sum_g[b] += 0.5 * (values[i] - values[j]).powi(2);
            count[b] += 1;
        }
    }
    (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (sum_h[b] / count[b] as f64, sum_g[b] / count[b] as f64, count[b]))
        .collect()
}

/// Pair-count weighted least-squares fit over a log-spaced range grid.
pub fn fit_exponential(bins: &[(f64, f64, usize)], fixed_nugget: Option<f64>, max_lag: f64) -> ExponentialVariogram {
    let fallback = ExponentialVariogram { sill: 1.0, range: max_lag.max(1.0), nugget: fixed_nugget.unwrap_or(0.0) };
    if bins.is_empty() {
        return fallback;
    }
    let h_min = bins.iter().map(|b| b.0).fold(f64::INFINITY, f64::min);
    let (lo, hi) = ((0.25 * h_min).ln(), (4.0 * max_lag).ln());
    let mut best: Option<(f64, ExponentialVariogram)> = None;
    for k in 0..60 {
        let range = (lo + (hi - lo) * k as f64 / 59.0).exp();
        let basis: Vec<f64> = bins.iter().map(|b| 1.0 - (-b.0 / range).exp()).collect();
        let (sill, nugget) = match fixed_nugget {
            Some(n0) => (weighted_slope(bins, &basis, n0), n0),
            None => weighted_affine(bins, &basis),
        };
        let sse: f64 = bins
            .iter()
            .zip(&basis)
            .map(|(b, f)| b.2 as f64 * (nugget + sill * f - b.1).powi(2))
            .sum();
        if best.as_ref().is_none_or(|(s, _)| sse < *s) {
            best = Some((sse, ExponentialVariogram { sill, range, nugget }));
        }
    }
    let vg = best.expect("range grid is non-empty").1;
    if vg.sill <= f64::EPSILON {
        // Flat field: any valid model yields weights summing to one.
        ExponentialVariogram { sill: 1.0, range: vg.range, nugget: vg.nugget }
    } else {
        vg
    }
}

fn weighted_slope(bins: &[(f64, f64, usize)], basis: &[f64], n0: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (b, f) in bins.iter().zip(basis) {
        let w = b.2 as f64;
        num += w * f * (b.1 - n0);
        den += w * f * f;
    }
    if den > 0.0 {
        (num / den).max(0.0)
    } else {
        0.0
    }
}

fn weighted_affine(bins: &[(f64, f64, usize)], basis: &[f64]) -> (f64, f64) {
    let (mut sw, mut sf, mut sg, mut sff, mut sfg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (b, f) in bins.iter().zip(basis) {
        let w = b.2 as f64;
        sw += w;
        sf += w * f;
        sg += w * b.1;
        sff += w * f * f;
        sfg += w * f * b.1;
    }
    let det = sw * sff - sf * sf;
    if det.abs() > 1e-300 {
        let sill = (sw * sfg - sf * sg) / det;
        let nugget = (sg - sill * sf) / sw;
        if sill >= 0.0 && nugget >= 0.0 {
            return (sill, nugget);
        }
    }
    (weighted_slope(bins, basis, 0.0), 0.0)
}

fn system_matrix(points: &[[f64; 2]], vg: &ExponentialVariogram, extra: f64) -> DMatrix<f64> {
    let n = points.len();
    let mut a = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = vg.cov(dist(points[i], points[j]));
        }
        a[(i, i)] += vg.nugget + extra;
        a[(i, n)] = 1.0;
        a[(n, i)] = 1.0;
    }
    a
}

/// Solve `a x = b`, accepting the answer only if it is finite and the
/// relative residual is small.
fn checked_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let x = a.clone().lu().solve(b)?;
    if !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    let resid = (a * &x - b).norm();
    (resid <= 1e-8 * b.norm().max(1e-300)).then_some(x)
}

/// Solve with the regularization ladder. Returns the solution and the
/// diagonal term that made it succeed.
fn solve_with_ladder(points: &[[f64; 2]], vg: &ExponentialVariogram, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if let Some(x) = checked_solve(&system_matrix(points, vg, 0.0), b) {
        return Ok((x, 0.0));
    }
    for k in (2..=10).rev() {
        let extra = vg.sill * 10f64.powi(-k);
        if let Some(x) = checked_solve(&system_matrix(points, vg, extra), b) {
            return Ok((x, extra));
        }
    }
    Err(Error::Validation("kriging system is singular even after regularization".into()))
}

/// Ordinary kriging weights and Lagrange multiplier for a single target.
pub fn ordinary_kriging_weights(
    points: &[[f64; 2]],
    target: [f64; 2],
    vg: &ExponentialVariogram,
) -> Result<(Vec<f64>, f64)> {
    let n = points.len();
    if n == 0 {
        return Err(Error::invalid("kriging needs at least one sample"));
    }
    let mut b = DVector::zeros(n + 1);
    for i in 0..n {
        b[i] = vg.cov(dist(points[i], target));
    }
    b[n] = 1.0;
    let (x, _) = solve_with_ladder(points, vg, &b)?;
    Ok((x.as_slice()[..n].to_vec(), x[n]))
}

/// Kriging upsampler. The variogram is fitted on the LR samples themselves.
pub fn kriging_upsample(lr: &Raster, factor: usize, cfg: &VariogramConfig) -> Result<(Raster, KrigingDiagnostics)> {
    if factor == 0 {
        return Err(Error::invalid("scale factor must be positive"));
    }
    if cfg.n_bins == 0 || !(cfg.max_lag_fraction > 0.0) {
        return Err(Error::invalid("variogram needs at least one bin and a positive lag fraction"));
    }
    if !(cfg.nugget >= 0.0) {
        return Err(Error::invalid("nugget must be non-negative"));
    }
    let n = lr.side();
    if n < 2 {
        return Err(Error::invalid("kriging needs at least two distinct LR samples"));
    }
    let points = sample_sites(n);
    let values = lr.as_slice();
    let max_lag = cfg.max_lag_fraction * dist(points[0], points[points.len() - 1]);
    let vg = fit_exponential(&empirical_variogram(&points, values, cfg.n_bins, max_lag), (!cfg.fit_nugget).then_some(cfg.nugget), max_lag);
    let out_side = n * factor;
    let target = |y: usize, x: usize| [y as f64 / factor as f64, x as f64 / factor as f64];

    match cfg.neighbors {
        None => {
            // Dual form: one solve against the data, then each prediction is a
            // covariance-weighted sum.
            let mut rhs = DVector::zeros(points.len() + 1);
            rhs.as_mut_slice()[..points.len()].copy_from_slice(values);
            let (lambda, extra) = solve_with_ladder(&points, &vg, &rhs)?;
            let mu = lambda[points.len()];
            let out = Raster::from_fn(out_side, |y, x| {
                let t = target(y, x);
                points.iter().zip(lambda.iter()).map(|(p, l)| l * vg.cov(dist(*p, t))).sum::<f64>() + mu
            });
            Ok((out, KrigingDiagnostics { variogram: vg, added_nugget: extra, fallback_used: extra > 0.0 }))
        }
        Some(k) => {
            let k = k.clamp(1, points.len());
            let mut max_extra: f64 = 0.0;
            let mut data = Vec::with_capacity(out_side * out_side);
            for y in 0..out_side {
                for x in 0..out_side {
                    let t = target(y, x);
                    let mut idx: Vec<usize> = (0..points.len()).collect();
                    idx.sort_by(|&a, &b| dist(points[a], t).total_cmp(&dist(points[b], t)).then(a.cmp(&b)));
                    idx.truncate(k);
                    let local: Vec<[f64; 2]> = idx.iter().map(|&i| points[i]).collect();
                    let mut b = DVector::zeros(k + 1);
                    for (i, p) in local.iter().enumerate() {
                        b[i] = vg.cov(dist(*p, t));
                    }
                    b[k] = 1.0;
                    let (w, extra) = solve_with_ladder(&local, &vg, &b)?;
                    max_extra = max_extra.max(extra);
                    data.push(idx.iter().enumerate().map(|(i, &g)| w[i] * values[g]).sum());
                }
            }
            let out = Raster::from_vec(out_side, data)?;
            Ok((out, KrigingDiagnostics { variogram: vg, added_nugget: max_extra, fallback_used: max_extra > 0.0 }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::decimate;

    #[test]
    fn weights_sum_to_one_and_exact_at_site() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        let vg = ExponentialVariogram { sill: 1.0, range: 2.0, nugget: 0.0 };
        let (w, _) = ordinary_kriging_weights(&pts, [0.3, 0.6], &vg).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (w, mu) = ordinary_kriging_weights(&pts, pts[2], &vg).unwrap();
        for (i, wi) in w.iter().enumerate() {
            assert!((wi - if i == 2 { 1.0 } else { 0.0 }).abs() < 1e-10);
        }
        assert!(mu.abs() < 1e-10);
    }

    #[test]
    fn constant_field_is_reproduced() {
        let (out, diag) = kriging_upsample(&Raster::filled(4, 0.6), 2, &VariogramConfig::default()).unwrap();
        assert!(out.as_slice().iter().all(|v| (v - 0.6).abs() < 1e-9));
        assert_eq!(diag.variogram.sill, 1.0);
    }

    #[test]
    fn exact_at_sites_full_and_local() {
        let lr = Raster::from_fn(5, |i, j| ((i * 7 + j * 3) % 5) as f64 / 4.0);
        let (full, _) = kriging_upsample(&lr, 3, &VariogramConfig::default()).unwrap();
        let d = decimate(&full, 3).unwrap();
        assert!(d.as_slice().iter().zip(lr.as_slice()).all(|(a, b)| (a - b).abs() < 1e-8));
        let cfg = VariogramConfig { neighbors: Some(9), ..Default::default() };
        let (local, _) = kriging_upsample(&lr, 3, &cfg).unwrap();
        let d = decimate(&local, 3).unwrap();
        assert!(d.as_slice().iter().zip(lr.as_slice()).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn fit_recovers_known_model() {
        let truth = ExponentialVariogram { sill: 2.0, range: 3.0, nugget: 0.0 };
        let bins: Vec<_> = (1..12).map(|k| (k as f64 * 0.5, truth.gamma(k as f64 * 0.5), 10)).collect();
        let vg = fit_exponential(&bins, Some(0.0), 6.0);
        assert!((vg.range - 3.0).abs() / 3.0 < 0.1, "{vg:?}");
        assert!((vg.sill - 2.0).abs() / 2.0 < 0.1, "{vg:?}");
    }

    #[test]
    fn rejects_tiny_input() {
        assert!(kriging_upsample(&Raster::filled(1, 0.5), 2, &VariogramConfig::default()).is_err());
    }
}
