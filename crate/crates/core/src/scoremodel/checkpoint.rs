//! Model checkpoints.
//!
//! Little-endian layout: magic `MDCK`, `u32` version, `u32` header length,
//! a JSON header describing the network, grid and schedule, then the
//! parameters as `f32`, then (if the header says so) the Adam first and
//! second moments as `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{DenoiserNet, NetConfig};
use super::train::AdamState;
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tetgrid::TetGrid;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The grid a model was trained for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub resolution: usize,
    pub extent: f64,
    /// Deformation bound as a multiple of the cell size.
    pub deformation_scale: f64,
}

impl GridSpec {
    pub fn of(grid: &TetGrid) -> Self {
        Self {
            resolution: grid.resolution(),
            extent: grid.extent(),
            deformation_scale: grid.max_deformation() / grid.cell_size(),
        }
    }

    pub fn build(&self) -> Result<TetGrid> {
        TetGrid::bcc(self.resolution, self.extent)?.with_deformation_scale(self.deformation_scale)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    grid: GridSpec,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    num_params: usize,
    adam_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: DenoiserNet,
    pub grid: GridSpec,
    pub schedule: NoiseSchedule,
    pub optimizer: Option<AdamState>,
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let (beta_start, beta_end) = ckpt.schedule.beta_range();
    let header = Header {
        net: ckpt.net.config().clone(),
        grid: ckpt.grid,
        steps: ckpt.schedule.steps(),
        beta_start,
        beta_end,
        num_params: ckpt.net.num_params(),
        adam_step: ckpt.optimizer.as_ref().map(|a| a.step),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    push_f32s(&mut buf, ckpt.net.params());
    if let Some(adam) = &ckpt.optimizer {
        if adam.m.len() != header.num_params || adam.v.len() != header.num_params {
            return Err(Error::Dimension {
                expected: header.num_params,
                actual: adam.m.len(),
            });
        }
        push_f32s(&mut buf, &adam.m);
        push_f32s(&mut buf, &adam.v);
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let word = |at: usize| -> Result<[u8; 4]> {
        bytes
            .get(at..at + 4)
            .map(|b| [b[0], b[1], b[2], b[3]])
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))
    };
    if word(0)? != *CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(word(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u32::from_le_bytes(word(8)?) as usize;
    let json = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let n = header.num_params;
    let blocks = if header.adam_step.is_some() { 3 } else { 1 };
    let start = 12 + hlen;
    if bytes.len() != start + 4 * n * blocks {
        return Err(Error::Format(format!(
            "checkpoint size {} does not match header ({})",
            bytes.len(),
            start + 4 * n * blocks
        )));
    }
    let block = |b: usize| -> Vec<f64> {
        bytes[start + 4 * n * b..start + 4 * n * (b + 1)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect()
    };
    let mut net = DenoiserNet::zeros(header.net)?;
    net.set_params(block(0))?;
    let schedule = make_schedule(header.steps, header.beta_start, header.beta_end)?;
    let optimizer = header.adam_step.map(|step| AdamState {
        step,
        m: block(1),
        v: block(2),
    });
    Ok(Checkpoint {
        net,
        grid: header.grid,
        schedule,
        optimizer,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_checkpoint(&bytes)
}
