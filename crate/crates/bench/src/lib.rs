//! Shared fixtures for the benchmarks.

use cdiff_core::denoiser::{condition_input, init_params, raster_to_feat, DenoiserParams, Descriptor};
use cdiff_core::synth::{gen_dataset, CityParams, EnvCfPair, SimulatorConfig};
use cdiff_core::tensor::Feat;
use cdiff_core::GridSpec;

/// One synthetic pair on a 256 m area with `hr_side` cells and factor 4.
pub fn pair(hr_side: usize, seed: u64) -> EnvCfPair {
    let grid = GridSpec::new(256.0, hr_side).expect("valid grid");
    let ds = gen_dataset(1, grid, 4, &CityParams::default(), &SimulatorConfig::default(), seed).expect("dataset");
    ds.pairs.into_iter().next().expect("one pair")
}

/// Default-descriptor parameters with every weight nonzero, plus a
/// `(condition, noisy state)` input pair for `pair`.
pub fn model_inputs(p: &EnvCfPair) -> (DenoiserParams<f32>, Feat<f32>, Feat<f32>) {
    let mut params = init_params::<f32>(&Descriptor::default(), 1).expect("params");
    for (i, v) in params.as_mut_slice().iter_mut().enumerate() {
        if *v == 0.0 {
            *v = 1e-3 * ((i % 7) as f32 - 3.0);
        }
    }
    let cond = condition_input(p.lr.pixels(), p.factor());
    let state = raster_to_feat(p.hr.pixels());
    (params, cond, state)
}
