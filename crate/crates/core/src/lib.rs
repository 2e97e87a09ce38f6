//! Diffusion-based super-resolution of environment-aware channel gain maps,
//! with classical interpolation baselines and evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod denoiser;
pub mod error;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::{ChannelGainMap, EnvCf, EnvironmentMap, GrayMapping, GridSpec, Raster, Role};
pub use harness::{pipeline_smoke, Method, RunConfig, StageError};
pub use schedule::{linear_schedule, Schedule, ScheduleParams};
