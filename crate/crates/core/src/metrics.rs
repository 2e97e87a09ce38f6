//! PSNR, SSIM and NMSE on rasters, and the per-method comparison report.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Raster;

/// PSNR reported for a zero-error pair.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_same(a: &Raster, b: &Raster) -> Result<()> {
    if a.side() != b.side() {
        return Err(Error::shape(format!("raster sides differ: {} vs {}", a.side(), b.side())));
    }
    Ok(())
}

/// Optional per-pixel selection. `None` means every pixel counts.
fn selected<'a>(mask: Option<&'a [bool]>, n: usize) -> impl Iterator<Item = usize> + 'a {
    (0..n).filter(move |&i| mask.is_none_or(|m| m[i]))
}

fn mse_masked(x_hat: &Raster, x: &Raster, mask: Option<&[bool]>) -> Result<f64> {
    check_same(x_hat, x)?;
    let (a, b) = (x_hat.as_slice(), x.as_slice());
    let (mut acc, mut n) = (0.0, 0usize);
    for i in selected(mask, a.len()) {
        acc += (a[i] - b[i]).powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no pixels selected"));
    }
    Ok(acc / n as f64)
}

pub fn mse(x_hat: &Raster, x: &Raster) -> Result<f64> {
    mse_masked(x_hat, x, None)
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(x_hat: &Raster, x: &Raster, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid("PSNR peak must be positive"));
    }
    Ok(psnr_from_mse(mse(x_hat, x)?, peak))
}

fn nmse_masked(x_hat: &Raster, x: &Raster, mask: Option<&[bool]>) -> Result<f64> {
    check_same(x_hat, x)?;
    let (a, b) = (x_hat.as_slice(), x.as_slice());
    let (mut err, mut energy) = (0.0, 0.0);
    for i in selected(mask, a.len()) {
        err += (a[i] - b[i]).powi(2);
        energy += b[i] * b[i];
    }
    if energy == 0.0 {
        return Err(Error::UndefinedReference("reference raster has zero energy".into()));
    }
    Ok(err / energy)
}

pub fn nmse(x_hat: &Raster, x: &Raster) -> Result<f64> {
    nmse_masked(x_hat, x, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub peak: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window: 11, sigma: 1.5, peak: 1.0, k1: 0.01, k2: 0.03 }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output side is `n - k + 1`.
fn filter_valid(data: &[f64], n: usize, k: &[f64]) -> Vec<f64> {
    let m = n - k.len() + 1;
    let mut rows = vec![0.0; n * m];
    for y in 0..n {
        for x in 0..m {
            rows[y * m + x] = k.iter().enumerate().map(|(i, w)| w * data[y * n + x + i]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for y in 0..m {
        for x in 0..m {
            out[y * m + x] = k.iter().enumerate().map(|(i, w)| w * rows[(y + i) * m + x]).sum();
        }
    }
    out
}

/// SSIM map over all fully contained windows.
pub fn ssim_map(x_hat: &Raster, x: &Raster, cfg: &SsimConfig) -> Result<Vec<f64>> {
    check_same(x_hat, x)?;
    if cfg.window == 0 || !(cfg.sigma > 0.0) || !(cfg.peak > 0.0) {
        return Err(Error::invalid("SSIM window, sigma and peak must be positive"));
    }
    let n = x.side();
    if n < cfg.window {
        return Err(Error::shape(format!("image side {n} is smaller than the SSIM window {}", cfg.window)));
    }
    let k = gaussian_window(cfg.window, cfg.sigma);
    let (a, b) = (x_hat.as_slice(), x.as_slice());
    let prod = |f: &dyn Fn(usize) -> f64| (0..n * n).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, n, &k);
    let mu_b = filter_valid(b, n, &k);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), n, &k);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), n, &k);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), n, &k);
    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);
    Ok((0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect())
}

pub fn ssim(x_hat: &Raster, x: &Raster, cfg: &SsimConfig) -> Result<f64> {
    let m = ssim_map(x_hat, x, cfg)?;
    Ok((m.iter().sum::<f64>() / m.len() as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub nmse: f64,
}

pub fn pair_metrics(x_hat: &Raster, x: &Raster, cfg: &SsimConfig) -> Result<PairMetrics> {
    Ok(PairMetrics { psnr_db: psnr(x_hat, x, cfg.peak)?, ssim: ssim(x_hat, x, cfg)?, nmse: nmse(x_hat, x)? })
}

/// Gain-only metrics: pixels where `building` is set are ignored. SSIM is
/// taken as the mean of the SSIM map over windows whose center is open.
pub fn pair_metrics_masked(x_hat: &Raster, x: &Raster, building: &[bool], cfg: &SsimConfig) -> Result<PairMetrics> {
    if building.len() != x.as_slice().len() {
        return Err(Error::shape("mask length differs from raster size"));
    }
    let open: Vec<bool> = building.iter().map(|b| !b).collect();
    let psnr_db = psnr_from_mse(mse_masked(x_hat, x, Some(&open))?, cfg.peak);
    let nmse = nmse_masked(x_hat, x, Some(&open))?;
    let map = ssim_map(x_hat, x, cfg)?;
    let (n, m, h) = (x.side(), x.side() - cfg.window + 1, cfg.window / 2);
    let vals: Vec<f64> = (0..map.len()).filter(|&i| open[(i / m + h) * n + i % m + h]).map(|i| map[i]).collect();
    let ssim = if vals.is_empty() { 1.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    Ok(PairMetrics { psnr_db, ssim: ssim.clamp(-1.0, 1.0), nmse })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub nmse: f64,
    pub n_items: usize,
}

/// Published full-scale figures for the diffusion model, shown as context
/// only: they were obtained on a different dataset and budget.
pub const PUBLISHED_CDIFF: PairMetrics = PairMetrics { psnr_db: 31.15, ssim: 0.9280, nmse: 0.0073 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub config_hash: String,
}

pub const CSV_HEADER: &str = "method,psnr_db,ssim,nmse,n_items,config_hash";

impl Report {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{},{}", r.method, r.psnr_db, r.ssim, r.nmse, r.n_items, self.config_hash);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |why: String| Error::Validation(format!("report: {why}"));
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(bad("missing header".into()));
        }
        let mut rows = Vec::new();
        let mut hash = String::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields in {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
            rows.push(ReportRow {
                method: f[0].to_string(),
                psnr_db: num(f[1])?,
                ssim: num(f[2])?,
                nmse: num(f[3])?,
                n_items: f[4].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            });
            hash = f[5].to_string();
        }
        Ok(Report { rows, config_hash: hash })
    }

    /// Human-readable table, with the published diffusion figures appended as
    /// a context row that is marked as not reproduced here.
    pub fn render_table(&self) -> String {
        let mut s = format!("{:<24} {:>9} {:>8} {:>9} {:>7}\n", "method", "PSNR(dB)", "SSIM", "NMSE", "items");
        for r in &self.rows {
            let _ = writeln!(s, "{:<24} {:>9.2} {:>8.4} {:>9.4} {:>7}", r.method, r.psnr_db, r.ssim, r.nmse, r.n_items);
        }
        let p = PUBLISHED_CDIFF;
        let _ = writeln!(s, "{:<24} {:>9.2} {:>8.4} {:>9.4} {:>7}", "cdiff (published)*", p.psnr_db, p.ssim, p.nmse, "-");
        s.push_str("* published full-scale result, not reproduced by this run\n");
        s
    }
}

/// Mean metrics of each method's outputs against the shared references.
pub fn evaluate(methods: &[(String, Vec<Raster>)], references: &[Raster], cfg: &SsimConfig, config_hash: &str) -> Result<Report> {
    let mut rows = Vec::with_capacity(methods.len());
    for (name, outputs) in methods {
        if outputs.len() != references.len() {
            return Err(Error::shape(format!(
                "{name}: {} outputs for {} references",
                outputs.len(),
                references.len()
            )));
        }
        if outputs.is_empty() {
            return Err(Error::invalid(format!("{name}: nothing to evaluate")));
        }
        let per: Vec<PairMetrics> =
            outputs.par_iter().zip(references.par_iter()).map(|(o, r)| pair_metrics(o, r, cfg)).collect::<Result<_>>()?;
        let n = per.len() as f64;
        rows.push(ReportRow {
            method: name.clone(),
            psnr_db: per.iter().map(|m| m.psnr_db).sum::<f64>() / n,
            ssim: per.iter().map(|m| m.ssim).sum::<f64>() / n,
            nmse: per.iter().map(|m| m.nmse).sum::<f64>() / n,
            n_items: per.len(),
        });
    }
    Ok(Report { rows, config_hash: config_hash.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Raster {
        Raster::from_fn(n, |i, j| ((i * 13 + j * 7) % 17) as f64 / 16.0)
    }

    #[test]
    fn psnr_cases() {
        let x = ramp(12);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        let y = Raster::filled(4, 0.3);
        let e1 = psnr(&y.map(|v| v + 0.1), &y, 1.0).unwrap();
        assert!((e1 - 20.0).abs() < 1e-9);
        let e2 = psnr(&y.map(|v| v + 0.05), &y, 1.0).unwrap();
        assert!((e2 - e1 - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert!(psnr(&Raster::zeros(3), &Raster::zeros(4), 1.0).is_err());
    }

    #[test]
    fn nmse_cases() {
        let x = ramp(8);
        assert_eq!(nmse(&x, &x).unwrap(), 0.0);
        assert!((nmse(&Raster::zeros(8), &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((nmse(&x.map(|v| 2.0 * v), &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(nmse(&x, &Raster::zeros(8)), Err(Error::UndefinedReference(_))));
        // Not symmetric.
        let y = x.map(|v| 0.5 * v + 0.1);
        assert!((nmse(&x, &y).unwrap() - nmse(&y, &x).unwrap()).abs() > 1e-6);
    }

    #[test]
    fn ssim_cases() {
        let cfg = SsimConfig::default();
        let x = ramp(16);
        assert!((ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let inv = x.map(|v| 1.0 - v);
        let s = ssim(&inv, &x, &cfg).unwrap();
        assert!((-1.0..1.0).contains(&s));
        let (m1, m2) = (0.2, 0.7);
        let c1 = 1e-4;
        let want = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        let got = ssim(&Raster::filled(12, m1), &Raster::filled(12, m2), &cfg).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(ssim(&Raster::zeros(8), &Raster::zeros(8), &cfg).is_err());
    }

    #[test]
    fn evaluate_and_csv() {
        let refs = vec![ramp(12), ramp(12).map(|v| 0.5 * v + 0.2)];
        let noisy: Vec<Raster> = refs.iter().map(|r| r.map(|v| v + 0.1)).collect();
        let methods = vec![("perfect".to_string(), refs.clone()), ("shifted".to_string(), noisy)];
        let rep = evaluate(&methods, &refs, &SsimConfig::default(), "h").unwrap();
        let p = rep.row("perfect").unwrap();
        assert_eq!((p.psnr_db, p.ssim, p.nmse, p.n_items), (PSNR_CAP_DB, 1.0, 0.0, 2));
        assert!((rep.row("shifted").unwrap().psnr_db - 20.0).abs() < 1e-9);

        let single = evaluate(&[("a".into(), vec![refs[1].clone()])], &refs[..1], &SsimConfig::default(), "h").unwrap();
        let m = pair_metrics(&refs[1], &refs[0], &SsimConfig::default()).unwrap();
        let r = &single.rows[0];
        assert_eq!((r.psnr_db, r.ssim, r.nmse), (m.psnr_db, m.ssim, m.nmse));

        let csv = rep.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(Report::from_csv(&csv).unwrap().rows.len(), 2);
        let table = rep.render_table();
        assert!(table.contains("31.15") && table.contains("not reproduced"));
    }

    #[test]
    fn masked_ignores_buildings() {
        let x = ramp(12);
        let mut y = x.clone();
        let mut mask = vec![false; 144];
        mask[0] = true;
        y.set(0, 0, 0.9);
        let m = pair_metrics_masked(&y, &x, &mask, &SsimConfig::default()).unwrap();
        assert_eq!(m.psnr_db, PSNR_CAP_DB);
        assert_eq!(m.nmse, 0.0);
    }

    proptest! {
        #[test]
        fn symmetry_and_bounds(a in prop::collection::vec(0.0f64..1.0, 144), b in prop::collection::vec(0.0f64..1.0, 144)) {
            let (x, y) = (Raster::from_vec(12, a).unwrap(), Raster::from_vec(12, b).unwrap());
            let cfg = SsimConfig::default();
            prop_assert!((psnr(&x, &y, 1.0).unwrap() - psnr(&y, &x, 1.0).unwrap()).abs() < 1e-12);
            let (s1, s2) = (ssim(&x, &y, &cfg).unwrap(), ssim(&y, &x, &cfg).unwrap());
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s1));
            prop_assert!((ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn nmse_quadratic_scaling(e in prop::collection::vec(-0.2f64..0.2, 64), c in 0.1f64..5.0) {
            let x = Raster::from_fn(8, |i, j| 0.1 + (i + j) as f64 / 20.0);
            let er = Raster::from_vec(8, e).unwrap();
            let add = |s: f64| Raster::from_fn(8, |i, j| x.get(i, j) + s * er.get(i, j));
            let base = nmse(&add(1.0), &x).unwrap();
            prop_assert!((nmse(&add(c), &x).unwrap() - c * c * base).abs() <= 1e-10 * (1.0 + base));
        }
    }
}
