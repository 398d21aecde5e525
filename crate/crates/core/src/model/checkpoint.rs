//! Binary checkpoint container.
//!
//! ```text
//! "RVFC" | u16 version | u32 header length | JSON header | f32 payload | SHA-256
//! ```
//!
//! All integers and floats are little-endian. The header lists every block
//! with its shape and payload offset (in values); the trailing digest covers
//! every byte before it.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelError, RoVFConfig, RoVFModel};
use crate::encoders::{EncoderConfig, EncoderError, ToyPatchEncoder};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RVFC";
const VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint: {0}")]
    Format(String),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where the weights came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub init_seed: u64,
    pub train_seed: u64,
    pub epoch: usize,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: RoVFConfig,
    encoder: Option<EncoderConfig>,
    lineage: SeedLineage,
    blocks: Vec<BlockEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: RoVFModel,
    /// Present when the patch encoder is part of the model.
    pub encoder: Option<ToyPatchEncoder>,
    pub lineage: SeedLineage,
}

impl Checkpoint {
    fn stores(&self) -> impl Iterator<Item = (&str, &ndarray::Array2<f64>)> {
        let enc = self.encoder.iter().flat_map(|e| e.params().iter());
        enc.chain(self.model.params().iter())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (name, m) in self.stores() {
            blocks.push(BlockEntry {
                name: name.to_string(),
                shape: [m.nrows(), m.ncols()],
                offset,
                len: m.len(),
            });
            offset += m.len();
        }
        let header = Header {
            model: self.model.config().clone(),
            encoder: self.encoder.as_ref().map(|e| e.config().clone()),
            lineage: self.lineage,
            blocks,
        };
        let header = serde_json::to_vec(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(10 + header.len() + 4 * offset + DIGEST_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u16::<LittleEndian>(VERSION)?;
        out.write_u32::<LittleEndian>(header.len() as u32)?;
        out.extend_from_slice(&header);
        for (_, m) in self.stores() {
            for &v in m.iter() {
                out.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |m: &str| CheckpointError::Format(m.to_string());
        if bytes.len() < 10 + DIGEST_LEN {
            return Err(fmt("file too short"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut cur = Cursor::new(&body[4..]);
        let version = cur.read_u16::<LittleEndian>()?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let header_len = cur.read_u32::<LittleEndian>()? as usize;
        let mut header = vec![0; header_len];
        cur.read_exact(&mut header).map_err(|_| fmt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let payload_start = 10 + header_len;
        let n_values: usize = header.blocks.iter().map(|b| b.len).sum();
        if body.len() - payload_start.min(body.len()) != 4 * n_values {
            return Err(fmt("payload size does not match the block table"));
        }
        let mut enc_params = ParamStore::new();
        let mut model_params = ParamStore::new();
        let mut expected_offset = 0;
        for b in &header.blocks {
            if b.offset != expected_offset || b.len != b.shape[0] * b.shape[1] {
                return Err(CheckpointError::Format(format!("inconsistent block {}", b.name)));
            }
            expected_offset += b.len;
            let mut values = Vec::with_capacity(b.len);
            for _ in 0..b.len {
                values.push(f64::from(cur.read_f32::<LittleEndian>()?));
            }
            let m = Array2::from_shape_vec((b.shape[0], b.shape[1]), values).expect("shape checked");
            if b.name.starts_with("encoder.") {
                enc_params.push(b.name.clone(), m);
            } else {
                model_params.push(b.name.clone(), m);
            }
        }
        let model = RoVFModel::from_params(header.model, model_params)?;
        let encoder = match header.encoder {
            Some(cfg) => {
                let (Some(w), Some(bias)) = (
                    enc_params.index_of("encoder.proj.weight"),
                    enc_params.index_of("encoder.proj.bias"),
                ) else {
                    return Err(fmt("encoder config without encoder weights"));
                };
                Some(ToyPatchEncoder::with_weights(
                    cfg,
                    enc_params.get(w).clone(),
                    enc_params.get(bias).clone(),
                )?)
            }
            None if enc_params.is_empty() => None,
            None => return Err(fmt("encoder weights without encoder config")),
        };
        Ok(Self {
            model,
            encoder,
            lineage: header.lineage,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
