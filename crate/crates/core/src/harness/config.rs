//! Run configuration: TOML on disk, with a content hash that ignores key
//! order and output paths.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::BaselineConfig;
use crate::denoiser::{AdamConfig, Descriptor, EmaConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::metrics::SsimConfig;
use crate::schedule::ScheduleParams;
use crate::synth::{CityParams, SimulatorConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub area_side_m: f64,
    /// HR raster side in cells.
    pub hr_resolution: usize,
    pub factor: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { area_side_m: 256.0, hr_resolution: 64, factor: 4 }
    }
}

impl GridConfig {
    pub fn hr(&self) -> Result<GridSpec> {
        GridSpec::new(self.area_side_m, self.hr_resolution)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_pairs: usize,
    pub seed: u64,
    pub n_buildings: usize,
    pub building_size_m: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        let city = CityParams::default();
        DataConfig { n_pairs: 1000, seed: 1, n_buildings: city.n_buildings, building_size_m: city.size_range_m }
    }
}

impl DataConfig {
    pub fn city(&self) -> CityParams {
        CityParams { n_buildings: self.n_buildings, size_range_m: self.building_size_m, seed: self.seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub seed: u64,
    /// Sample with the weight average rather than the raw weights.
    pub use_ema: bool,
    pub clamp_x0: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { seed: 9, use_ema: true, clamp_x0: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate only the first `max_items` validation pairs; 0 means all.
    pub max_items: usize,
    pub ssim: SsimConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_items: 32, ssim: SsimConfig::default() }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub simulator: SimulatorConfig,
    pub data: DataConfig,
    pub schedule: ScheduleParams,
    pub denoiser: Descriptor,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub baselines: BaselineConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::smoke()
    }
}

impl RunConfig {
    /// Desk-scale configuration: 16 → 64 on a 256 m area, T = 200, a small
    /// network and a short training budget.
    pub fn smoke() -> Self {
        RunConfig {
            grid: GridConfig::default(),
            simulator: SimulatorConfig::default(),
            data: DataConfig::default(),
            schedule: ScheduleParams { steps: 200, beta_start: 1e-6, beta_end: 0.05 },
            denoiser: Descriptor::default(),
            train: TrainConfig {
                steps: 1500,
                batch_size: 8,
                adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
                ema: EmaConfig { decay: 0.995, start: 375 },
                seed: 3,
                checkpoint_every: 500,
                plateau: None,
            },
            sample: SampleConfig::default(),
            baselines: BaselineConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Full-scale settings: 64 → 256 at 1 m, T = 1000, linear betas
    /// 1e-6 to 1e-2, Adam at 5e-5 for 500k steps with batch 16, EMA 0.9999
    /// from step 5000.
    pub fn full_scale() -> Self {
        RunConfig {
            grid: GridConfig { area_side_m: 256.0, hr_resolution: 256, factor: 4 },
            simulator: SimulatorConfig::default(),
            data: DataConfig { n_pairs: 56_000, ..DataConfig::default() },
            schedule: ScheduleParams::default(),
            denoiser: Descriptor { base_channels: 64, channel_mult: vec![1, 2, 4], groups: 8, time_dim: 128, kernel_size: 3 },
            train: TrainConfig { checkpoint_every: 10_000, ..TrainConfig::default() },
            sample: SampleConfig::default(),
            baselines: BaselineConfig::default(),
            eval: EvalConfig { max_items: 0, ssim: SsimConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        let hr = self.grid.hr().map_err(cfg)?;
        hr.coarsen(self.grid.factor).map_err(cfg)?;
        self.simulator.validate().map_err(cfg)?;
        self.schedule.build().map_err(cfg)?;
        self.denoiser.validate().map_err(cfg)?;
        let m = self.denoiser.size_multiple();
        if !self.grid.hr_resolution.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "HR resolution {} is not divisible by {m} as the denoiser depth requires",
                self.grid.hr_resolution
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        let (lo, hi) = self.data.building_size_m;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("data.building_size_m ({lo}, {hi}) is not a valid interval")));
        }
        Ok(())
    }

    /// Parse a TOML config. Keys that are not given take their values from
    /// [`RunConfig::smoke`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let given: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(RunConfig::smoke()).expect("run config serializes to TOML");
        merge(&mut base, given);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON form (object keys sorted), hex encoded.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("run config serializes to JSON");
        let canonical = serde_json::to_string(&value).expect("JSON value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First 12 hex digits of [`RunConfig::hash`].
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

/// Overlay `over` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for cfg in [RunConfig::smoke(), RunConfig::full_scale()] {
            cfg.validate().unwrap();
            let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn full_scale_settings() {
        let c = RunConfig::full_scale();
        assert_eq!(c.grid.area_side_m, 256.0);
        assert_eq!(c.grid.hr().unwrap().cell_size_m(), 1.0);
        assert_eq!(c.grid.hr().unwrap().coarsen(c.grid.factor).unwrap().cell_size_m(), 4.0);
        assert_eq!((c.schedule.steps, c.schedule.beta_start, c.schedule.beta_end), (1000, 1e-6, 1e-2));
        assert_eq!((c.train.steps, c.train.batch_size, c.train.adam.lr), (500_000, 16, 5e-5));
        assert_eq!((c.train.ema.decay, c.train.ema.start), (0.9999, 5000));
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = "[grid]\narea_side_m = 128.0\nfactor = 2\n\n[data]\nn_pairs = 10\nseed = 4\n";
        let b = "[data]\nseed = 4\nn_pairs = 10\n\n[grid]\nfactor = 2\narea_side_m = 128.0\n";
        let (ca, cb) = (RunConfig::from_toml(a).unwrap(), RunConfig::from_toml(b).unwrap());
        assert_eq!(ca.hash(), cb.hash());
        let c = RunConfig::from_toml("[data]\nseed = 5\n").unwrap();
        assert_ne!(c.hash(), ca.hash());
        assert_eq!(ca.hash().len(), 64);
    }

    #[test]
    fn missing_keys_take_smoke_values() {
        let c = RunConfig::from_toml("[train]\nsteps = 7\n\n[train.ema]\ndecay = 0.5\n").unwrap();
        let smoke = RunConfig::smoke();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.ema.decay, 0.5);
        assert_eq!(c.train.ema.start, smoke.train.ema.start);
        assert_eq!((c.train.seed, c.train.adam.lr), (smoke.train.seed, smoke.train.adam.lr));
        assert_eq!(c.schedule, smoke.schedule);
        assert_eq!(RunConfig::from_toml("").unwrap(), smoke);
    }

    #[test]
    fn rejects_inconsistent_or_unknown() {
        assert!(matches!(RunConfig::from_toml("[grid]\nhr_resolution = 30\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[grid]\nhr_resolution = 66\nfactor = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("bogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nbatch_size = 0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nbogus = 0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nsteps = \"x\"\n"), Err(Error::Config(_))));
    }
}
