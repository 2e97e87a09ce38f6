//! Procedural cities and a log-distance + wall-penetration gain simulator.
//!
//! This stands in for a ray-tracing simulator: gains decay with distance from
//! the base station and drop by a fixed amount per building cell crossed on the
//! straight line from the base station.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::io::{read_envcf, sidecar_path, write_envcf, RasterMeta};
use crate::grid::{
    compose_envcf, downsample, ChannelGainMap, EnvCf, EnvironmentMap, GrayMapping, GridSpec, Raster, Role,
    NO_COVERAGE_DB,
};
use crate::rng::{derive_seed, rng_from_seed};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Reference distance of the log-distance model, meters.
pub const REFERENCE_DISTANCE_M: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub carrier_freq_hz: f64,
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    pub noise_psd_dbm_hz: f64,
    pub pathloss_exponent: f64,
    pub wall_loss_db: f64,
    pub min_db: f64,
    pub max_db: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            carrier_freq_hz: 5.9e9,
            bandwidth_hz: 10e6,
            tx_power_dbm: 23.0,
            noise_psd_dbm_hz: -174.0,
            pathloss_exponent: 2.5,
            wall_loss_db: 10.0,
            min_db: -147.0,
            max_db: -47.0,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_freq_hz > 0.0 && self.carrier_freq_hz.is_finite()) {
            return Err(Error::invalid("carrier frequency must be positive"));
        }
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite()) {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        if !(self.pathloss_exponent > 0.0 && self.pathloss_exponent.is_finite()) {
            return Err(Error::invalid("path-loss exponent must be positive"));
        }
        if !(self.wall_loss_db >= 0.0 && self.wall_loss_db.is_finite()) {
            return Err(Error::invalid("wall loss must be non-negative"));
        }
        self.mapping().map(|_| ())
    }

    pub fn mapping(&self) -> Result<GrayMapping> {
        GrayMapping::new(self.min_db, self.max_db)
    }

    /// Receiver SNR in dB for a cell with the given gain.
    pub fn snr_db(&self, gain_db: f64) -> f64 {
        self.tx_power_dbm + gain_db - (self.noise_psd_dbm_hz + 10.0 * self.bandwidth_hz.log10())
    }
}

/// Free-space path loss in dB.
pub fn fspl_db(freq_hz: f64, distance_m: f64) -> f64 {
    20.0 * (4.0 * std::f64::consts::PI * distance_m * freq_hz / SPEED_OF_LIGHT).log10()
}

/// Distance-only part of the gain (no walls).
pub fn free_space_gain_db(cfg: &SimulatorConfig, distance_m: f64) -> f64 {
    let d = distance_m.max(REFERENCE_DISTANCE_M);
    -(fspl_db(cfg.carrier_freq_hz, REFERENCE_DISTANCE_M)
        + 10.0 * cfg.pathloss_exponent * (d / REFERENCE_DISTANCE_M).log10())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityParams {
    pub n_buildings: usize,
    pub size_range_m: (f64, f64),
    pub seed: u64,
}

impl Default for CityParams {
    fn default() -> Self {
        CityParams { n_buildings: 12, size_range_m: (16.0, 48.0), seed: 0 }
    }
}

impl CityParams {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range_m;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("building size range ({lo}, {hi}) is not a valid interval")));
        }
        Ok(())
    }
}

/// Axis-aligned building footprint in cell units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Building {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

pub fn rasterize_buildings(side: usize, buildings: &[Building]) -> Raster {
    let mut r = Raster::zeros(side);
    for b in buildings {
        for i in b.row..(b.row + b.rows).min(side) {
            for j in b.col..(b.col + b.cols).min(side) {
                r.set(i, j, 1.0);
            }
        }
    }
    r
}

pub fn gen_city(grid: GridSpec, params: &CityParams) -> Result<EnvironmentMap> {
    params.validate()?;
    let n = grid.resolution();
    let cell = grid.cell_size_m();
    let mut rng = rng_from_seed(params.seed);
    let (lo, hi) = params.size_range_m;
    let to_cells = |m: f64| ((m / cell).round() as usize).clamp(1, n);
    let mut buildings = Vec::with_capacity(params.n_buildings);
    for _ in 0..params.n_buildings {
        let rows = to_cells(if lo < hi { rng.random_range(lo..=hi) } else { lo });
        let cols = to_cells(if lo < hi { rng.random_range(lo..=hi) } else { lo });
        let row = rng.random_range(0..=n - rows);
        let col = rng.random_range(0..=n - cols);
        buildings.push(Building { row, col, rows, cols });
    }
    let cells = rasterize_buildings(n, &buildings);
    let env = EnvironmentMap::new(grid, cells, None)?;
    let open: Vec<(usize, usize)> = env.open_cells().collect();
    if open.is_empty() {
        return Err(Error::Generation("buildings cover every cell; no room for the base station".into()));
    }
    let bs = open[rng.random_range(0..open.len())];
    env.with_bs(bs)
}

/// Cells on the Bresenham line from `from` to `to`, endpoints excluded.
pub fn line_cells(from: (usize, usize), to: (usize, usize)) -> Vec<(usize, usize)> {
    let (mut x, mut y) = (from.0 as i64, from.1 as i64);
    let (x1, y1) = (to.0 as i64, to.1 as i64);
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        if (x, y) == (x1, y1) {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        if (x, y) != (x1, y1) {
            out.push((x as usize, y as usize));
        }
    }
    out
}

pub fn walls_crossed(env: &EnvironmentMap, from: (usize, usize), to: (usize, usize)) -> usize {
    line_cells(from, to).into_iter().filter(|&(i, j)| env.is_building(i, j)).count()
}

/// Large-scale gain for every open cell; building cells get no coverage.
pub fn simulate_gain(env: &EnvironmentMap, cfg: &SimulatorConfig) -> Result<ChannelGainMap> {
    cfg.validate()?;
    let bs = env
        .bs_cell()
        .ok_or_else(|| Error::invalid("environment has no base-station cell"))?;
    let grid = *env.grid();
    let cell = grid.cell_size_m();
    let gain = Raster::from_fn(grid.resolution(), |i, j| {
        if env.is_building(i, j) {
            return NO_COVERAGE_DB;
        }
        let di = i as f64 - bs.0 as f64;
        let dj = j as f64 - bs.1 as f64;
        let d = cell * (di * di + dj * dj).sqrt();
        free_space_gain_db(cfg, d) - cfg.wall_loss_db * walls_crossed(env, bs, (i, j)) as f64
    });
    ChannelGainMap::from_db(grid, gain, cfg.mapping()?)
}

#[derive(Clone, Debug)]
pub struct EnvCfPair {
    pub hr: EnvCf,
    pub lr: EnvCf,
    pub bs_cell: Option<(usize, usize)>,
}

/// Train/validation index sets. Validation is the trailing fifth by index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Split {
    /// 4:1 split, validation taken from the end.
    pub fn four_to_one(n: usize) -> Split {
        let n_val = n / 5;
        let n_train = n - n_val;
        Split { train: (0..n_train).collect(), validation: (n_train..n).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_pairs: usize,
    pub grid_hr: GridSpec,
    pub factor: usize,
    pub city: CityParams,
    pub simulator: SimulatorConfig,
    pub seed: u64,
    pub pair_seeds: Vec<u64>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub pairs: Vec<EnvCfPair>,
    pub split: Split,
    pub meta: Option<DatasetMeta>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn train(&self) -> impl Iterator<Item = &EnvCfPair> {
        self.split.train.iter().map(move |&i| &self.pairs[i])
    }

    pub fn validation(&self) -> impl Iterator<Item = &EnvCfPair> {
        self.split.validation.iter().map(move |&i| &self.pairs[i])
    }

    /// Write `pairs/{i}_hr.png`, `pairs/{i}_lr.png` and `meta.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let pairs_dir = dir.join("pairs");
        std::fs::create_dir_all(&pairs_dir).map_err(|e| Error::io(&pairs_dir, e))?;
        let mapping = match &self.meta {
            Some(m) => m.simulator.mapping()?,
            None => GrayMapping::default(),
        };
        for (i, p) in self.pairs.iter().enumerate() {
            let hr = pairs_dir.join(format!("{i}_hr.png"));
            write_envcf(&hr, &p.hr, &RasterMeta::new(&p.hr, mapping, p.bs_cell))?;
            let lr = pairs_dir.join(format!("{i}_lr.png"));
            write_envcf(&lr, &p.lr, &RasterMeta::new(&p.lr, mapping, p.bs_cell.map(|(a, b)| (a / p.factor(), b / p.factor()))))?;
        }
        let meta_path = dir.join("meta.json");
        let text = match &self.meta {
            Some(m) => serde_json::to_string_pretty(m),
            None => serde_json::to_string_pretty(&serde_json::json!({ "split": self.split })),
        }
        .expect("dataset metadata serializes");
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
    }

    /// Load a dataset directory. `meta.json` is optional; without it every
    /// `{i}_hr`/`{i}_lr` pair found is used with a 4:1 split by index.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let pairs_dir = dir.join("pairs");
        let entries = std::fs::read_dir(&pairs_dir).map_err(|e| Error::io(&pairs_dir, e))?;
        let mut found: BTreeMap<usize, (bool, bool)> = BTreeMap::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&pairs_dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(stem) = name.strip_suffix(".png") else { continue };
            let (idx, hr) = if let Some(i) = stem.strip_suffix("_hr") {
                (i, true)
            } else if let Some(i) = stem.strip_suffix("_lr") {
                (i, false)
            } else {
                continue;
            };
            let Ok(idx) = idx.parse::<usize>() else { continue };
            let slot = found.entry(idx).or_default();
            if hr {
                slot.0 = true
            } else {
                slot.1 = true
            }
        }
        let indices: Vec<usize> = found.iter().filter(|(_, &(h, l))| h && l).map(|(&i, _)| i).collect();
        if indices.iter().enumerate().any(|(k, &i)| k != i) {
            return Err(Error::format(&pairs_dir, "pair indices must be contiguous from 0"));
        }
        let mut pairs = Vec::with_capacity(indices.len());
        for i in indices {
            let (hr, hr_meta) = read_envcf(&pairs_dir.join(format!("{i}_hr.png")), Role::Hr)?;
            let (mut lr, _) = read_envcf(&pairs_dir.join(format!("{i}_lr.png")), Role::Lr)?;
            if hr.side() % lr.side() != 0 {
                return Err(Error::format(&pairs_dir, format!("pair {i}: HR side {} not a multiple of LR side {}", hr.side(), lr.side())));
            }
            if lr.role() != Role::Lr || lr.grid().area_side_m() != hr.grid().area_side_m() {
                let grid = hr.grid().coarsen(hr.side() / lr.side())?;
                lr = EnvCf::new(grid, lr.into_pixels(), Role::Lr)?;
            }
            pairs.push(EnvCfPair { hr, lr, bs_cell: hr_meta.and_then(|m| m.bs_cell) });
        }
        let meta_path = dir.join("meta.json");
        let meta: Option<DatasetMeta> = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            serde_json::from_str(&text).ok()
        } else {
            None
        };
        let split = match &meta {
            Some(m) if m.n_pairs == pairs.len() => m.split.clone(),
            _ => Split::four_to_one(pairs.len()),
        };
        Ok(Dataset { pairs, split, meta })
    }
}

impl EnvCfPair {
    pub fn factor(&self) -> usize {
        self.hr.side() / self.lr.side()
    }
}

/// Generate `n_pairs` independent (HR, LR) EnvCF pairs.
///
/// Pair `i` uses the sub-seed `derive_seed(seed, i)`, so generation order does
/// not affect the result.
pub fn gen_dataset(
    n_pairs: usize,
    grid_hr: GridSpec,
    factor: usize,
    city: &CityParams,
    cfg: &SimulatorConfig,
    seed: u64,
) -> Result<Dataset> {
    grid_hr.coarsen(factor)?;
    cfg.validate()?;
    let pair_seeds: Vec<u64> = (0..n_pairs as u64).map(|i| derive_seed(seed, i)).collect();
    let pairs = pair_seeds
        .par_iter()
        .map(|&s| gen_pair(grid_hr, factor, &CityParams { seed: s, ..city.clone() }, cfg))
        .collect::<Result<Vec<_>>>()?;
    let split = Split::four_to_one(n_pairs);
    let meta = DatasetMeta {
        n_pairs,
        grid_hr,
        factor,
        city: city.clone(),
        simulator: cfg.clone(),
        seed,
        pair_seeds,
        split: split.clone(),
    };
    Ok(Dataset { pairs, split, meta: Some(meta) })
}

fn gen_pair(grid: GridSpec, factor: usize, city: &CityParams, cfg: &SimulatorConfig) -> Result<EnvCfPair> {
    let env = gen_city(grid, city)?;
    let gain = simulate_gain(&env, cfg)?;
    let hr = compose_envcf(&env, &gain)?;
    let lr = downsample(&hr, factor)?;
    Ok(EnvCfPair { hr, lr, bs_cell: env.bs_cell() })
}

pub fn dataset_exists(dir: &Path) -> bool {
    sidecar_path(&dir.join("pairs").join("0_hr.png")).exists()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    #[test]
    fn empty_city_is_open() {
        let g = make_grid(16.0, 16).unwrap();
        let env = gen_city(g, &CityParams { n_buildings: 0, size_range_m: (1.0, 2.0), seed: 3 }).unwrap();
        assert!(env.cells().as_slice().iter().all(|&v| v == 0.0));
        assert!(env.bs_cell().is_some());
    }

    #[test]
    fn city_is_deterministic() {
        let g = make_grid(64.0, 32).unwrap();
        let p = CityParams { n_buildings: 8, size_range_m: (4.0, 12.0), seed: 99 };
        assert_eq!(gen_city(g, &p).unwrap(), gen_city(g, &p).unwrap());
        let q = CityParams { seed: 100, ..p.clone() };
        assert_ne!(gen_city(g, &p).unwrap(), gen_city(g, &q).unwrap());
    }

    #[test]
    fn single_rectangle_rasterizes_by_hand() {
        let r = rasterize_buildings(8, &[Building { row: 2, col: 2, rows: 4, cols: 4 }]);
        for i in 0..8 {
            for j in 0..8 {
                let inside = (2..6).contains(&i) && (2..6).contains(&j);
                assert_eq!(r.get(i, j), if inside { 1.0 } else { 0.0 }, "cell ({i},{j})");
            }
        }
        assert_eq!(r.as_slice().iter().sum::<f64>(), 16.0);
    }

    #[test]
    fn full_cover_is_a_generation_error() {
        let g = make_grid(4.0, 4).unwrap();
        let p = CityParams { n_buildings: 1, size_range_m: (4.0, 4.0), seed: 1 };
        assert!(matches!(gen_city(g, &p), Err(Error::Generation(_))));
    }

    #[test]
    fn bs_cell_has_max_gain() {
        let g = make_grid(32.0, 32).unwrap();
        let env = gen_city(g, &CityParams { n_buildings: 5, size_range_m: (3.0, 8.0), seed: 5 }).unwrap();
        let cfg = SimulatorConfig::default();
        let gain = simulate_gain(&env, &cfg).unwrap();
        let (bi, bj) = env.bs_cell().unwrap();
        let db = gain.gain_db().unwrap();
        let at_bs = db.get(bi, bj);
        assert_eq!(at_bs, -fspl_db(cfg.carrier_freq_hz, 1.0));
        assert!(db.as_slice().iter().all(|&v| v <= at_bs));
    }

    #[test]
    fn fspl_reference_value() {
        // 20*log10(4*pi*5.9e9/299792458), evaluated independently.
        assert!((fspl_db(5.9e9, 1.0) - 47.864_823_454_726_26).abs() < 1e-9);
    }

    #[test]
    fn one_wall_ten_meters() {
        let g = make_grid(12.0, 12).unwrap();
        let mut cells = Raster::zeros(12);
        cells.set(0, 5, 1.0);
        let env = EnvironmentMap::new(g, cells, Some((0, 0))).unwrap();
        let cfg = SimulatorConfig { pathloss_exponent: 2.0, wall_loss_db: 7.5, ..Default::default() };
        let gain = simulate_gain(&env, &cfg).unwrap();
        let expected = -(47.864_823_454_726_26 + 20.0) - 7.5;
        assert!((gain.gain_db().unwrap().get(0, 10) - expected).abs() < 1e-9);
        assert_eq!(gain.gain_db().unwrap().get(0, 5), NO_COVERAGE_DB);
        assert_eq!(gain.gain_gray().get(0, 5), 0.0);
    }

    #[test]
    fn free_space_is_radially_monotone() {
        let g = make_grid(40.0, 20).unwrap();
        let env = EnvironmentMap::new(g, Raster::zeros(20), Some((7, 3))).unwrap();
        let gain = simulate_gain(&env, &SimulatorConfig::default()).unwrap();
        let db = gain.gain_db().unwrap();
        for target in [(19, 19), (0, 19), (19, 0), (0, 0), (7, 19)] {
            let mut prev = db.get(7, 3);
            for (i, j) in line_cells((7, 3), target).into_iter().chain([target]) {
                let v = db.get(i, j);
                assert!(v <= prev, "gain increased along ray to {target:?}");
                prev = v;
            }
        }
    }

    #[test]
    fn adding_a_wall_never_helps() {
        let g = make_grid(16.0, 16).unwrap();
        let env = EnvironmentMap::new(g, Raster::zeros(16), Some((1, 1))).unwrap();
        let cfg = SimulatorConfig::default();
        let before = simulate_gain(&env, &cfg).unwrap();
        let mut cells = Raster::zeros(16);
        let (i, j) = line_cells((1, 1), (14, 12))[6];
        cells.set(i, j, 1.0);
        let blocked = EnvironmentMap::new(g, cells, Some((1, 1))).unwrap();
        let after = simulate_gain(&blocked, &cfg).unwrap();
        let (a, b) = (after.gain_db().unwrap(), before.gain_db().unwrap());
        for k in 0..a.len() {
            assert!(a.as_slice()[k] <= b.as_slice()[k]);
        }
        assert!(a.get(14, 12) < b.get(14, 12));
    }

    #[test]
    fn line_excludes_endpoints() {
        assert_eq!(line_cells((0, 0), (0, 3)), vec![(0, 1), (0, 2)]);
        assert!(line_cells((2, 2), (2, 2)).is_empty());
        assert!(line_cells((2, 2), (3, 3)).is_empty());
        assert_eq!(line_cells((3, 0), (0, 0)), vec![(2, 0), (1, 0)]);
    }

    #[test]
    fn dataset_split_and_determinism() {
        let g = make_grid(64.0, 16).unwrap();
        let city = CityParams { n_buildings: 3, size_range_m: (8.0, 16.0), seed: 0 };
        let cfg = SimulatorConfig::default();
        let d = gen_dataset(100, g, 4, &city, &cfg, 7).unwrap();
        assert_eq!(d.split.train.len(), 80);
        assert_eq!(d.split.validation.len(), 20);
        assert_eq!(d.split.validation[0], 80);
        let d2 = gen_dataset(100, g, 4, &city, &cfg, 7).unwrap();
        for (a, b) in d.pairs.iter().zip(&d2.pairs) {
            assert_eq!(a.hr, b.hr);
            assert_eq!(a.lr, b.lr);
        }
        for p in &d.pairs {
            assert_eq!(p.lr.side(), 4);
            assert!(p.hr.pixels().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(gen_dataset(0, g, 4, &city, &cfg, 7).unwrap().is_empty());
        assert!(gen_dataset(3, g, 3, &city, &cfg, 7).is_err());
    }

    #[test]
    fn dataset_disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = make_grid(32.0, 16).unwrap();
        let city = CityParams { n_buildings: 4, size_range_m: (2.0, 6.0), seed: 0 };
        let d = gen_dataset(6, g, 2, &city, &SimulatorConfig::default(), 1).unwrap();
        d.write(dir.path()).unwrap();
        assert!(dataset_exists(dir.path()));
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back.split, d.split);
        assert_eq!(back.pairs[2].lr.side(), 8);
        assert_eq!(back.pairs[2].bs_cell, d.pairs[2].bs_cell);
        assert_eq!(back.pairs[2].lr.grid().cell_size_m(), 4.0);
    }

    #[test]
    fn loader_accepts_bare_layout() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = dir.path().join("pairs");
        std::fs::create_dir_all(&pairs).unwrap();
        for i in 0..5 {
            crate::grid::io::write_gray_png(&pairs.join(format!("{i}_hr.png")), &Raster::filled(8, 0.5)).unwrap();
            crate::grid::io::write_gray_png(&pairs.join(format!("{i}_lr.png")), &Raster::filled(2, 0.5)).unwrap();
        }
        let d = Dataset::load(dir.path()).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.split.train, vec![0, 1, 2, 3]);
        assert_eq!(d.pairs[0].lr.grid().area_side_m(), 8.0);
        assert_eq!(d.pairs[0].factor(), 4);
    }
}
