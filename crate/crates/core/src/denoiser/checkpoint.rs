//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header, then four little-endian `f32` arrays (params, ema, first moment,
//! second moment), each `n_params` long.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{DenoiserParams, Descriptor};
use super::optim::{AdamConfig, EmaConfig, TrainState};
use crate::error::{Error, Result};
use crate::schedule::ScheduleParams;

const MAGIC: &[u8; 8] = b"CDIFFCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub descriptor: Descriptor,
    pub schedule: ScheduleParams,
    pub step: u64,
    pub n_params: usize,
    pub adam: AdamConfig,
    pub ema: EmaConfig,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub schedule: ScheduleParams,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            descriptor: self.state.params.descriptor().clone(),
            schedule: self.schedule,
            step: self.state.step,
            n_params: self.state.params.len(),
            adam: self.state.adam,
            ema: self.state.ema_cfg,
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("checkpoint header serializes");
        let n = self.state.params.len();
        let mut out = Vec::with_capacity(16 + header.len() + 16 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for arr in [self.state.params.as_slice(), self.state.ema.as_slice(), &self.state.m, &self.state.v] {
            for v in arr {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |why: &str| Error::format(origin, why.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(&mut r).ok_or_else(|| bad("truncated version"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = read_u32(&mut r).ok_or_else(|| bad("truncated header length"))? as usize;
        if r.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..hlen]).map_err(|e| bad(&e.to_string()))?;
        r = &r[hlen..];
        let n = header.n_params;
        if r.len() != 16 * n {
            return Err(bad(&format!("expected {} payload bytes, found {}", 16 * n, r.len())));
        }
        let mut arrays = r.chunks_exact(4 * n).map(|chunk| {
            chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect::<Vec<f32>>()
        });
        let mut next = || arrays.next().expect("four arrays present");
        let params = DenoiserParams::from_data(&header.descriptor, next())?;
        let ema = DenoiserParams::from_data(&header.descriptor, next())?;
        let (m, v) = (next(), next());
        let state = TrainState { params, ema, m, v, step: header.step, adam: header.adam, ema_cfg: header.ema };
        Ok(Checkpoint { state, schedule: header.schedule, config_hash: header.config_hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Load and refuse a checkpoint built for another architecture or schedule.
    pub fn load_expecting(path: &Path, descriptor: &Descriptor, schedule: &ScheduleParams) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.ensure_compatible(descriptor, schedule)?;
        Ok(ck)
    }

    pub fn ensure_compatible(&self, descriptor: &Descriptor, schedule: &ScheduleParams) -> Result<()> {
        if self.state.params.descriptor() != descriptor {
            return Err(Error::CheckpointMismatch(format!(
                "descriptor {:?} does not match expected {:?}",
                self.state.params.descriptor(),
                descriptor
            )));
        }
        if &self.schedule != schedule {
            return Err(Error::CheckpointMismatch(format!(
                "schedule {:?} does not match expected {:?}",
                self.schedule, schedule
            )));
        }
        Ok(())
    }
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}
