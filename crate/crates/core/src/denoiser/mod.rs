//! Conditional noise predictor, its objective, and the training machinery.

pub mod checkpoint;
pub mod embed;
pub mod layers;
pub mod network;
pub mod objective;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use embed::time_embed;
pub use network::{init_params, Architecture, DenoiserParams, Descriptor};
pub use objective::{loss, loss_and_grad_with_draws, loss_with_draws, sample_draws, Batch, Draw, LossEval};
pub use optim::{adam_step, ema_update, AdamConfig, EmaConfig, TrainState};
pub use train::{smoothed, train, PlateauConfig, TrainConfig, TrainObserver, TrainOutcome};

use crate::baselines::bicubic_upsample;
use crate::error::Result;
use crate::grid::Raster;
use crate::tensor::{Feat, Real};

/// Anything that predicts the injected noise from `(condition, F_t, t)`.
pub trait NoisePredictor<F: Real>: Sync {
    fn predict(&self, cond: &Feat<F>, f_t: &Feat<F>, t: usize) -> Result<Feat<F>>;
}

impl<F: Real> NoisePredictor<F> for DenoiserParams<F> {
    fn predict(&self, cond: &Feat<F>, f_t: &Feat<F>, t: usize) -> Result<Feat<F>> {
        self.forward(cond, f_t, t)
    }
}

pub fn raster_to_feat<F: Real>(r: &Raster) -> Feat<F> {
    Feat::from_vec(1, r.side(), r.side(), r.as_slice().iter().map(|&v| F::real(v)).collect())
}

pub fn feat_to_raster<F: Real>(f: &Feat<F>) -> Result<Raster> {
    Raster::from_vec(f.h, f.data.iter().map(|v| v.as_f64()).collect())
}

/// Network conditioning input: the LR raster bicubically upsampled to HR size.
pub fn condition_input<F: Real>(lr: &Raster, factor: usize) -> Feat<F> {
    raster_to_feat(&bicubic_upsample(lr, factor))
}
