//! Trained model files: `NLBC1\n`, one JSON header line, then little-endian `f32`
//! parameter payloads in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{NoiseModel, TrainConfig};
use crate::autonet::{NetConfig, ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"NLBC1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub net: NetConfig,
    /// Optimizer steps taken.
    pub step: u64,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct BufferEntry {
    name: String,
    shape: [usize; 4],
    values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    train: TrainConfig,
    net: NetConfig,
    step: u64,
    loss_history: Vec<f64>,
    params: Vec<Entry>,
    buffers: Vec<BufferEntry>,
}

impl Checkpoint {
    pub fn is_blind(&self) -> bool {
        self.train.noise == NoiseModel::Blind
    }

    pub fn has_embedding(&self) -> bool {
        self.params.contains("embed.conv1.w")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            train: self.train.clone(),
            net: self.net,
            step: self.step,
            loss_history: self.loss_history.clone(),
            params: self
                .params
                .params()
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape(),
                })
                .collect(),
            buffers: self
                .params
                .buffers()
                .iter()
                .map(|(name, t)| BufferEntry {
                    name: name.clone(),
                    shape: t.shape(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        let json =
            serde_json::to_string(&header).map_err(|e| Error::BadCheckpoint(e.to_string()))?;
        let mut out =
            Vec::with_capacity(MAGIC.len() + json.len() + 1 + 4 * self.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        for t in self.params.params().values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::BadCheckpoint("missing NLBC1 magic".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::BadCheckpoint("unterminated header".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nl])
            .map_err(|e| Error::BadCheckpoint(format!("header: {e}")))?;
        let mut payload = &rest[nl + 1..];
        let expected: usize = header
            .params
            .iter()
            .map(|e| 4 * e.shape.iter().product::<usize>())
            .sum();
        if payload.len() != expected {
            return Err(Error::PayloadMismatch {
                expected,
                found: payload.len(),
            });
        }
        let mut params = ParamStore::new();
        for e in &header.params {
            let n: usize = e.shape.iter().product();
            let values = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            payload = &payload[4 * n..];
            params.insert(&e.name, Tensor::new(e.shape, values)?)?;
        }
        for b in header.buffers {
            params.insert_buffer(&b.name, Tensor::new(b.shape, b.values)?)?;
        }
        header.net.validate()?;
        Ok(Checkpoint {
            train: header.train,
            net: header.net,
            step: header.step,
            loss_history: header.loss_history,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
