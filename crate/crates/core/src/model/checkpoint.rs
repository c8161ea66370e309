//! Parameter checkpoints: a fixed little-endian header followed by the
//! parameters as `f32`, in declaration order.

use std::fs;
use std::path::Path;

use super::PredictorParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BMPP";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub frames: u32,
    pub hidden: u32,
    pub height: u32,
    pub width: u32,
}

pub fn encode_checkpoint(params: &PredictorParams, height: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * params.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    for v in [CHECKPOINT_VERSION, params.frames as u32, params.hidden as u32, height as u32, width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &params.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, PredictorParams)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated("checkpoint header".into()));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("checkpoint magic".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    let header = CheckpointHeader {
        version: word(0),
        frames: word(1),
        hidden: word(2),
        height: word(3),
        width: word(4),
    };
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if header.frames == 0 || header.hidden == 0 {
        return Err(Error::Format("checkpoint with zero frames or channels".into()));
    }
    let mut params = PredictorParams::zeros(header.frames as usize, header.hidden as usize);
    let body = &bytes[HEADER_LEN..];
    if body.len() < 4 * params.len() {
        return Err(Error::Truncated(format!(
            "checkpoint body ({} of {} bytes)",
            body.len(),
            4 * params.len()
        )));
    }
    if body.len() > 4 * params.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    for (v, chunk) in params.data.iter_mut().zip(body.chunks_exact(4)) {
        *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    Ok((header, params))
}

pub fn write_checkpoint(path: &Path, params: &PredictorParams, height: usize, width: usize) -> Result<()> {
    fs::write(path, encode_checkpoint(params, height, width)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, PredictorParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
