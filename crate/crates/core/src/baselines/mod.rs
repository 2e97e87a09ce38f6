//! Classical LR → HR reconstruction: nearest, bilinear, ordinary kriging and
//! radial basis functions, plus the bicubic kernel used to condition the
//! denoiser.
//!
//! Two alignment conventions are used. Nearest, bicubic, kriging and RBF
//! place LR sample `i` at HR index `i * factor`, matching the decimating
//! downsampler, so they are exact at sample sites. Bilinear uses the usual
//! image convention with half-pixel centers.

pub mod kriging;
pub mod rbf;

pub use kriging::{kriging_upsample, ordinary_kriging_weights, ExponentialVariogram, KrigingDiagnostics, VariogramConfig};
pub use rbf::{rbf_upsample, RbfConfig, RbfDiagnostics, RbfKernel};

use crate::error::{Error, Result};
use crate::grid::{EnvCf, GridSpec, Raster, Role};

pub fn nearest_upsample(lr: &Raster, factor: usize) -> Raster {
    let n = lr.side();
    Raster::from_fn(n * factor, |y, x| lr.get(y / factor, x / factor))
}

fn half_pixel_taps(dst: usize, factor: usize, n: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f64)
}

pub fn bilinear_upsample(lr: &Raster, factor: usize) -> Raster {
    let n = lr.side();
    let taps: Vec<_> = (0..n * factor).map(|d| half_pixel_taps(d, factor, n)).collect();
    Raster::from_fn(n * factor, |y, x| {
        let (y0, y1, fy) = taps[y];
        let (x0, x1, fx) = taps[x];
        let top = lr.get(y0, x0) * (1.0 - fx) + lr.get(y0, x1) * fx;
        let bottom = lr.get(y1, x0) * (1.0 - fx) + lr.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic_weight(d: f64) -> f64 {
    const A: f64 = -0.5;
    let d = d.abs();
    if d <= 1.0 {
        ((A + 2.0) * d - (A + 3.0)) * d * d + 1.0
    } else if d < 2.0 {
        ((A * d - 5.0 * A) * d + 8.0 * A) * d - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic interpolation with LR sample `i` at HR index `i * factor`;
/// indices beyond the border are clamped.
pub fn bicubic_upsample(lr: &Raster, factor: usize) -> Raster {
    let n = lr.side() as isize;
    let taps: Vec<[(usize, f64); 4]> = (0..lr.side() * factor)
        .map(|d| {
            let src = d as f64 / factor as f64;
            let base = src.floor() as isize;
            let frac = src - base as f64;
            let mut t = [(0usize, 0.0f64); 4];
            for (k, slot) in t.iter_mut().enumerate() {
                let off = k as isize - 1;
                let idx = (base + off).clamp(0, n - 1) as usize;
                *slot = (idx, cubic_weight(frac - off as f64));
            }
            t
        })
        .collect();
    Raster::from_fn(lr.side() * factor, |y, x| {
        let mut acc = 0.0;
        for &(iy, wy) in &taps[y] {
            for &(ix, wx) in &taps[x] {
                acc += wy * wx * lr.get(iy, ix);
            }
        }
        acc
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Nearest,
    Bilinear,
    Kriging,
    Rbf,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Nearest, Baseline::Bilinear, Baseline::Kriging, Baseline::Rbf];

    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Nearest => "nearest",
            Baseline::Bilinear => "bilinear",
            Baseline::Kriging => "kriging",
            Baseline::Rbf => "rbf",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub kriging: VariogramConfig,
    pub rbf: RbfConfig,
}

/// Upsample an LR EnvCF with a classical method. Kriging and RBF can
/// overshoot, so the result is clamped to `[0, 1]`.
pub fn upsample_envcf(method: Baseline, lr: &EnvCf, factor: usize, cfg: &BaselineConfig) -> Result<EnvCf> {
    if factor == 0 {
        return Err(Error::invalid("scale factor must be positive"));
    }
    let r = lr.pixels();
    let out = match method {
        Baseline::Nearest => nearest_upsample(r, factor),
        Baseline::Bilinear => bilinear_upsample(r, factor),
        Baseline::Kriging => kriging_upsample(r, factor, &cfg.kriging)?.0,
        Baseline::Rbf => rbf_upsample(r, factor, &cfg.rbf)?.0,
    };
    if !out.all_finite() {
        return Err(Error::Validation(format!("{} produced non-finite values", method.name())));
    }
    let grid = GridSpec::new(lr.grid().area_side_m(), lr.side() * factor)?;
    EnvCf::new(grid, out.map(|v| v.clamp(0.0, 1.0)), Role::Hr)
}

/// LR sample coordinates in LR-spacing units, row-major.
pub(crate) fn sample_sites(n: usize) -> Vec<[f64; 2]> {
    (0..n).flat_map(|i| (0..n).map(move |j| [i as f64, j as f64])).collect()
}

#[inline]
pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::decimate;
    use proptest::prelude::*;

    #[test]
    fn nearest_cases() {
        let r = Raster::from_vec(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = nearest_upsample(&r, 2);
        assert_eq!(
            up.as_slice(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(nearest_upsample(&r, 1), r);
        let c = Raster::filled(3, 0.4);
        assert!(nearest_upsample(&c, 3).as_slice().iter().all(|&v| v == 0.4));
    }

    #[test]
    fn bilinear_half_pixel_row() {
        // 2x2 with columns [0, 1]: each output row is [0, 0.25, 0.75, 1].
        let r = Raster::from_vec(2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = bilinear_upsample(&r, 2);
        for y in 0..4 {
            let row: Vec<f64> = (0..4).map(|x| up.get(y, x)).collect();
            assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn bicubic_exact_at_sites_and_constants() {
        let r = Raster::from_fn(5, |i, j| ((i * 3 + j * 7) % 5) as f64 / 4.0);
        let up = bicubic_upsample(&r, 4);
        assert_eq!(decimate(&up, 4).unwrap(), r);
        let c = bicubic_upsample(&Raster::filled(4, 0.3), 2);
        assert!(c.as_slice().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn envcf_wrapper_shapes() {
        let g = GridSpec::new(32.0, 4).unwrap();
        let lr = EnvCf::new(g, Raster::from_fn(4, |i, j| (i * 4 + j) as f64 / 15.0), Role::Lr).unwrap();
        for m in Baseline::ALL {
            let hr = upsample_envcf(m, &lr, 4, &BaselineConfig::default()).unwrap();
            assert_eq!(hr.side(), 16, "{}", m.name());
            assert_eq!(hr.grid().cell_size_m(), 2.0);
            assert_eq!(hr.role(), Role::Hr);
        }
    }

    proptest! {
        #[test]
        fn nearest_bilinear_stay_in_range(vals in prop::collection::vec(0.0f64..1.0, 16), factor in 1usize..5) {
            let r = Raster::from_vec(4, vals).unwrap();
            let (lo, hi) = r.min_max();
            for up in [nearest_upsample(&r, factor), bilinear_upsample(&r, factor)] {
                prop_assert_eq!(up.side(), 4 * factor);
                prop_assert!(up.as_slice().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
            }
            prop_assert_eq!(decimate(&nearest_upsample(&r, factor), factor).unwrap(), r);
        }

        #[test]
        fn bilinear_reproduces_affine_interior(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, factor in 1usize..6) {
            let n = 5;
            let r = Raster::from_fn(n, |i, j| a + b * i as f64 + c * j as f64);
            let up = bilinear_upsample(&r, factor);
            for y in 0..n * factor {
                for x in 0..n * factor {
                    let sy = (y as f64 + 0.5) / factor as f64 - 0.5;
                    let sx = (x as f64 + 0.5) / factor as f64 - 0.5;
                    let limit = (n - 1) as f64;
                    if (0.0..=limit).contains(&sy) && (0.0..=limit).contains(&sx) {
                        prop_assert!((up.get(y, x) - (a + b * sy + c * sx)).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
