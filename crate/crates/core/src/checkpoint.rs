//! Training checkpoints.
//!
//! Layout: `SPGS` magic, u32 LE format version, u64 LE payload length, the
//! SHA-256 of the payload, then the payload itself (JSON of [`Checkpoint`]).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::Camera;
use crate::dataio::{atomic_write, Dataset};
use crate::error::{Error, Result};
use crate::pipeline::Trainer;

pub const MAGIC: &[u8; 4] = b"SPGS";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8 + 32;

/// A training camera and its normalized time, kept so renders need no dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub time: f64,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Config, scene, Adam moments, counters and RNG state.
    pub trainer: Trainer,
    #[serde(default)]
    pub views: Vec<View>,
}

impl Checkpoint {
    pub fn new(trainer: Trainer, data: Option<&Dataset>) -> Self {
        let views = data
            .map(|d| {
                d.frames
                    .iter()
                    .map(|f| View {
                        time: f.time,
                        camera: f.camera.clone(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        Self {
            version: FORMAT_VERSION,
            trainer,
            views,
        }
    }

    /// The stored view whose time is nearest `t`.
    pub fn nearest_view(&self, t: f64) -> Option<&View> {
        self.views
            .iter()
            .min_by(|a, b| (a.time - t).abs().total_cmp(&(b.time - t).abs()))
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    encode_with_version(ck, FORMAT_VERSION)
}

fn encode_with_version(ck: &Checkpoint, version: u32) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(ck)?;
    let mut out = Vec::with_capacity(HEADER + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER {
        return Err(Error::Checkpoint(format!(
            "file is {} bytes, shorter than the {HEADER}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes; not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER..];
    if payload.len() != len {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header declares {len}; file truncated or corrupt",
            payload.len()
        )));
    }
    if Sha256::digest(payload).as_slice() != &bytes[16..48] {
        return Err(Error::Checkpoint("content hash mismatch; file corrupt".into()));
    }
    let ck: Checkpoint = serde_json::from_slice(payload)?;
    Ok(ck)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
