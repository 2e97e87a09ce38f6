//! Spatial discretization of the service area and the EnvCF raster types.
//!
//! An EnvCF is a single-channel gray raster where building cells carry the
//! value 1 and every other cell carries the normalized channel gain. Internally
//! the environment and gain layers are kept apart (`EnvironmentMap`,
//! `ChannelGainMap`) and only composed when a model-ready raster is needed.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square grid over a square target area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    area_side_m: f64,
    resolution: usize,
}

impl GridSpec {
    pub fn new(area_side_m: f64, resolution: usize) -> Result<Self> {
        make_grid(area_side_m, resolution)
    }

    pub fn area_side_m(&self) -> f64 {
        self.area_side_m
    }

    /// Cells per side.
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Side length of one (square) cell in meters.
    pub fn cell_size_m(&self) -> f64 {
        self.area_side_m / self.resolution as f64
    }

    pub fn cell_count(&self) -> usize {
        self.resolution * self.resolution
    }

    /// Same area sampled with `factor` times fewer cells per side.
    pub fn coarsen(&self, factor: usize) -> Result<GridSpec> {
        if factor == 0 || !self.resolution.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "factor {factor} does not divide resolution {}",
                self.resolution
            )));
        }
        make_grid(self.area_side_m, self.resolution / factor)
    }
}

pub fn make_grid(area_side_m: f64, resolution: usize) -> Result<GridSpec> {
    if !(area_side_m.is_finite() && area_side_m > 0.0) {
        return Err(Error::invalid(format!("area side must be positive, got {area_side_m}")));
    }
    if resolution == 0 {
        return Err(Error::invalid("resolution must be at least 1"));
    }
    Ok(GridSpec { area_side_m, resolution })
}

/// Row-major square raster of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    side: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(side: usize) -> Self {
        Raster { side, data: vec![0.0; side * side] }
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Raster { side, data: vec![value; side * side] }
    }

    pub fn from_vec(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side {
            return Err(Error::shape(format!(
                "raster of side {side} needs {} values, got {}",
                side * side,
                data.len()
            )));
        }
        Ok(Raster { side, data })
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                data.push(f(i, j));
            }
        }
        Raster { side, data }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.side + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.side + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster { side: self.side, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Affine dB → gray mapping, clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayMapping {
    pub min_db: f64,
    pub max_db: f64,
}

impl Default for GrayMapping {
    fn default() -> Self {
        GrayMapping { min_db: -147.0, max_db: -47.0 }
    }
}

impl GrayMapping {
    pub fn new(min_db: f64, max_db: f64) -> Result<Self> {
        if !(min_db.is_finite() && max_db.is_finite() && min_db < max_db) {
            return Err(Error::invalid(format!("gray range needs min_db < max_db, got ({min_db}, {max_db})")));
        }
        Ok(GrayMapping { min_db, max_db })
    }

    /// Non-finite inputs (the no-coverage sentinel) map to 0.
    pub fn to_gray(&self, gain_db: f64) -> f64 {
        if gain_db.is_nan() {
            return 0.0;
        }
        ((gain_db - self.min_db) / (self.max_db - self.min_db)).clamp(0.0, 1.0)
    }

    pub fn to_db(&self, gray: f64) -> f64 {
        self.min_db + gray * (self.max_db - self.min_db)
    }
}

/// Gain value used for cells without coverage (inside buildings).
pub const NO_COVERAGE_DB: f64 = f64::NEG_INFINITY;

/// Binary building raster plus the base-station cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    grid: GridSpec,
    cells: Raster,
    bs_cell: Option<(usize, usize)>,
}

impl EnvironmentMap {
    pub fn new(grid: GridSpec, cells: Raster, bs_cell: Option<(usize, usize)>) -> Result<Self> {
        let n = grid.resolution();
        if cells.side() != n {
            return Err(Error::shape(format!("environment raster side {} != grid resolution {n}", cells.side())));
        }
        if let Some(v) = cells.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!("environment cell value {v} is not binary")));
        }
        if let Some((i, j)) = bs_cell {
            if i >= n || j >= n {
                return Err(Error::Validation(format!("base station ({i}, {j}) outside {n}x{n} grid")));
            }
            if cells.get(i, j) != 0.0 {
                return Err(Error::Validation(format!("base station ({i}, {j}) placed inside a building")));
            }
        }
        Ok(EnvironmentMap { grid, cells, bs_cell })
    }

    pub fn empty(grid: GridSpec) -> Self {
        EnvironmentMap { grid, cells: Raster::zeros(grid.resolution()), bs_cell: None }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn cells(&self) -> &Raster {
        &self.cells
    }

    pub fn bs_cell(&self) -> Option<(usize, usize)> {
        self.bs_cell
    }

    pub fn is_building(&self, i: usize, j: usize) -> bool {
        self.cells.get(i, j) != 0.0
    }

    pub fn open_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.grid.resolution();
        (0..n).flat_map(move |i| (0..n).map(move |j| (i, j))).filter(move |&(i, j)| !self.is_building(i, j))
    }

    pub fn with_bs(mut self, bs: (usize, usize)) -> Result<Self> {
        self.bs_cell = Some(bs);
        EnvironmentMap::new(self.grid, self.cells, self.bs_cell)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGainMap {
    grid: GridSpec,
    gain_db: Option<Raster>,
    gain_gray: Raster,
    mapping: GrayMapping,
}

impl ChannelGainMap {
    pub fn from_db(grid: GridSpec, gain_db: Raster, mapping: GrayMapping) -> Result<Self> {
        if gain_db.side() != grid.resolution() {
            return Err(Error::shape("gain raster does not match grid"));
        }
        if gain_db.as_slice().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Validation("gain map contains NaN or +inf".into()));
        }
        let gain_gray = gain_db.map(|v| mapping.to_gray(v));
        Ok(ChannelGainMap { grid, gain_db: Some(gain_db), gain_gray, mapping })
    }

    /// Gray-only map, e.g. recovered from a decomposed EnvCF.
    pub fn from_gray(grid: GridSpec, gain_gray: Raster, mapping: GrayMapping) -> Result<Self> {
        if gain_gray.side() != grid.resolution() {
            return Err(Error::shape("gray raster does not match grid"));
        }
        if let Some(v) = gain_gray.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("gray value {v} outside [0, 1]")));
        }
        Ok(ChannelGainMap { grid, gain_db: None, gain_gray, mapping })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn gain_db(&self) -> Option<&Raster> {
        self.gain_db.as_ref()
    }

    pub fn gain_gray(&self) -> &Raster {
        &self.gain_gray
    }

    pub fn mapping(&self) -> GrayMapping {
        self.mapping
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Hr,
    Lr,
}

/// Composed environment + gain raster.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvCf {
    grid: GridSpec,
    pixels: Raster,
    role: Role,
}

impl EnvCf {
    pub fn new(grid: GridSpec, pixels: Raster, role: Role) -> Result<Self> {
        if pixels.side() != grid.resolution() {
            return Err(Error::shape(format!(
                "EnvCF raster side {} != grid resolution {}",
                pixels.side(),
                grid.resolution()
            )));
        }
        if let Some(v) = pixels.as_slice().iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Validation(format!("EnvCF pixel {v} outside [0, 1]")));
        }
        Ok(EnvCf { grid, pixels, role })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn pixels(&self) -> &Raster {
        &self.pixels
    }

    pub fn into_pixels(self) -> Raster {
        self.pixels
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn side(&self) -> usize {
        self.pixels.side()
    }
}

pub fn compose_envcf(env: &EnvironmentMap, gain: &ChannelGainMap) -> Result<EnvCf> {
    if env.grid() != gain.grid() {
        return Err(Error::shape("environment and gain maps are on different grids"));
    }
    let cells = env.cells().as_slice();
    let gray = gain.gain_gray().as_slice();
    let mut out = Vec::with_capacity(cells.len());
    for (k, (&b, &g)) in cells.iter().zip(gray).enumerate() {
        if b != 0.0 && g != 0.0 {
            let n = env.grid().resolution();
            return Err(Error::Validation(format!(
                "nonzero gain {g} inside building cell ({}, {})",
                k / n,
                k % n
            )));
        }
        out.push((g + b).clamp(0.0, 1.0));
    }
    EnvCf::new(*env.grid(), Raster::from_vec(env.grid().resolution(), out)?, Role::Hr)
}

/// Split an EnvCF back into a building raster and a gray gain layer.
/// The returned environment has no base-station cell.
pub fn decompose_envcf(
    f: &EnvCf,
    building_threshold: f64,
    mapping: GrayMapping,
) -> Result<(EnvironmentMap, ChannelGainMap)> {
    if !(building_threshold > 0.0 && building_threshold <= 1.0) {
        return Err(Error::invalid(format!("building threshold must lie in (0, 1], got {building_threshold}")));
    }
    let n = f.side();
    let px = f.pixels();
    let cells = px.map(|v| if v >= building_threshold { 1.0 } else { 0.0 });
    let gray = Raster::from_fn(n, |i, j| if cells.get(i, j) == 0.0 { px.get(i, j) } else { 0.0 });
    let env = EnvironmentMap::new(*f.grid(), cells, None)?;
    let gain = ChannelGainMap::from_gray(*f.grid(), gray, mapping)?;
    Ok((env, gain))
}

/// Point decimation: output (i, j) = input (i·factor, j·factor).
pub fn downsample(f: &EnvCf, factor: usize) -> Result<EnvCf> {
    let grid = f.grid().coarsen(factor)?;
    let pixels = decimate(f.pixels(), factor)?;
    EnvCf::new(grid, pixels, Role::Lr)
}

pub fn decimate(r: &Raster, factor: usize) -> Result<Raster> {
    if factor == 0 || !r.side().is_multiple_of(factor) {
        return Err(Error::invalid(format!("factor {factor} does not divide side {}", r.side())));
    }
    let m = r.side() / factor;
    Ok(Raster::from_fn(m, |i, j| r.get(i * factor, j * factor)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize) -> GridSpec {
        make_grid(n as f64, n).unwrap()
    }

    #[test]
    fn grid_cell_sizes() {
        assert_eq!(make_grid(256.0, 256).unwrap().cell_size_m(), 1.0);
        assert_eq!(make_grid(256.0, 64).unwrap().cell_size_m(), 4.0);
        let single = make_grid(100.0, 1).unwrap();
        assert_eq!(single.cell_size_m(), 100.0);
        assert_eq!(single.cell_count(), 1);
    }

    #[test]
    fn grid_rejects_bad_inputs() {
        assert!(matches!(make_grid(0.0, 4), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_grid(-3.0, 4), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_grid(10.0, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn compose_cases() {
        let g = grid(4);
        let env = EnvironmentMap::empty(g);
        let gain = ChannelGainMap::from_gray(g, Raster::filled(4, 0.5), GrayMapping::default()).unwrap();
        let f = compose_envcf(&env, &gain).unwrap();
        assert!(f.pixels().as_slice().iter().all(|&v| v == 0.5));

        let mut cells = Raster::zeros(4);
        cells.set(1, 2, 1.0);
        let env = EnvironmentMap::new(g, cells, Some((0, 0))).unwrap();
        let gain = ChannelGainMap::from_gray(g, Raster::from_fn(4, |i, j| if (i, j) == (1, 2) { 0.0 } else { 0.3 }), GrayMapping::default()).unwrap();
        let f = compose_envcf(&env, &gain).unwrap();
        assert_eq!(f.pixels().get(1, 2), 1.0);
        assert_eq!(f.pixels().get(0, 0), 0.3);

        let env = EnvironmentMap::new(g, Raster::filled(4, 1.0), None).unwrap();
        let gain = ChannelGainMap::from_gray(g, Raster::zeros(4), GrayMapping::default()).unwrap();
        let f = compose_envcf(&env, &gain).unwrap();
        assert!(f.pixels().as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn compose_errors() {
        let env = EnvironmentMap::new(grid(2), Raster::filled(2, 1.0), None).unwrap();
        let gain = ChannelGainMap::from_gray(grid(2), Raster::filled(2, 0.1), GrayMapping::default()).unwrap();
        assert!(matches!(compose_envcf(&env, &gain), Err(Error::Validation(_))));
        let gain = ChannelGainMap::from_gray(grid(4), Raster::zeros(4), GrayMapping::default()).unwrap();
        assert!(matches!(compose_envcf(&env, &gain), Err(Error::Shape(_))));
    }

    #[test]
    fn decompose_by_hand() {
        let g = make_grid(2.0, 2).unwrap();
        let f = EnvCf::new(g, Raster::from_vec(2, vec![0.2, 1.0, 1.0, 0.2]).unwrap(), Role::Hr).unwrap();
        let (env, gain) = decompose_envcf(&f, 1.0, GrayMapping::default()).unwrap();
        assert_eq!(env.cells().as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(gain.gain_gray().as_slice(), &[0.2, 0.0, 0.0, 0.2]);
        assert_eq!(env.bs_cell(), None);

        let zero = EnvCf::new(g, Raster::zeros(2), Role::Hr).unwrap();
        let (env, gain) = decompose_envcf(&zero, 1.0, GrayMapping::default()).unwrap();
        assert!(env.cells().as_slice().iter().all(|&v| v == 0.0));
        assert!(gain.gain_gray().as_slice().iter().all(|&v| v == 0.0));

        assert!(decompose_envcf(&zero, 0.0, GrayMapping::default()).is_err());
        assert!(decompose_envcf(&zero, 1.5, GrayMapping::default()).is_err());
    }

    #[test]
    fn downsample_corner_stride() {
        let g = make_grid(4.0, 4).unwrap();
        let f = EnvCf::new(g, Raster::from_fn(4, |i, j| (i * 4 + j) as f64 / 16.0), Role::Hr).unwrap();
        let lr = downsample(&f, 2).unwrap();
        assert_eq!(lr.pixels().as_slice(), &[0.0, 2.0 / 16.0, 8.0 / 16.0, 10.0 / 16.0]);
        assert_eq!(lr.role(), Role::Lr);
        assert_eq!(lr.grid().cell_size_m(), 2.0);

        let same = downsample(&f, 1).unwrap();
        assert_eq!(same.pixels(), f.pixels());
        assert!(matches!(downsample(&f, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn downsample_full_scale_sizes() {
        let g = make_grid(256.0, 256).unwrap();
        let f = EnvCf::new(g, Raster::zeros(256), Role::Hr).unwrap();
        let lr = downsample(&f, 4).unwrap();
        assert_eq!(lr.side(), 64);
        assert_eq!(lr.grid().cell_size_m(), 4.0);
    }

    #[test]
    fn gray_mapping_clamps() {
        let m = GrayMapping::default();
        assert_eq!(m.to_gray(-147.0), 0.0);
        assert_eq!(m.to_gray(-47.0), 1.0);
        assert_eq!(m.to_gray(-97.0), 0.5);
        assert_eq!(m.to_gray(-300.0), 0.0);
        assert_eq!(m.to_gray(0.0), 1.0);
        assert_eq!(m.to_gray(NO_COVERAGE_DB), 0.0);
        assert!(GrayMapping::new(-10.0, -20.0).is_err());
    }

    #[test]
    fn environment_validation() {
        let g = grid(3);
        let mut cells = Raster::zeros(3);
        cells.set(1, 1, 1.0);
        assert!(EnvironmentMap::new(g, cells.clone(), Some((1, 1))).is_err());
        assert!(EnvironmentMap::new(g, cells.clone(), Some((3, 0))).is_err());
        assert!(EnvironmentMap::new(g, Raster::filled(3, 0.5), None).is_err());
        assert!(EnvironmentMap::new(g, cells, Some((0, 1))).is_ok());
    }

    fn env_gain_strategy() -> impl Strategy<Value = (Vec<bool>, Vec<f64>)> {
        (1usize..7).prop_flat_map(|n| {
            (prop::collection::vec(any::<bool>(), n * n), prop::collection::vec(0.0f64..0.95, n * n))
        })
    }

    proptest! {
        #[test]
        fn compose_decompose_round_trip((bits, grays) in env_gain_strategy()) {
            let n = (bits.len() as f64).sqrt() as usize;
            let g = grid(n);
            let cells = Raster::from_vec(n, bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
            let gray = Raster::from_vec(n, bits.iter().zip(&grays).map(|(&b, &v)| if b { 0.0 } else { v }).collect()).unwrap();
            let env = EnvironmentMap::new(g, cells, None).unwrap();
            let gain = ChannelGainMap::from_gray(g, gray, GrayMapping::default()).unwrap();
            let f = compose_envcf(&env, &gain).unwrap();
            prop_assert!(f.pixels().as_slice().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            let (env2, gain2) = decompose_envcf(&f, 1.0, GrayMapping::default()).unwrap();
            prop_assert_eq!(env2.cells(), env.cells());
            prop_assert_eq!(gain2.gain_gray(), gain.gain_gray());
        }

        #[test]
        fn downsample_composes(a in 1usize..4, b in 1usize..4, k in 1usize..3, seed in any::<u64>()) {
            let n = a * b * k;
            let g = grid(n);
            let px = Raster::from_fn(n, |i, j| ((i * 31 + j * 17) as u64 ^ seed) as f64 % 97.0 / 97.0);
            let f = EnvCf::new(g, px, Role::Hr).unwrap();
            let once = downsample(&f, a * b).unwrap();
            let twice = downsample(&downsample(&f, a).unwrap(), b).unwrap();
            prop_assert_eq!(once.pixels(), twice.pixels());
        }

        #[test]
        fn grid_scale_consistent(side in 0.5f64..1e4, res in 1usize..512) {
            let a = make_grid(side, res).unwrap();
            let b = make_grid(2.0 * side, 2 * res).unwrap();
            prop_assert_eq!(a.cell_size_m(), b.cell_size_m());
        }
    }
}
