//! Binary token store.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "RVFE" | u16 version = 1 | u32 d_model | u32 n_clips
//! per clip: u64 clip_id | u32 n_frames | u32 n_tokens
//!           | n_frames·n_tokens·d_model f32 in (frame, token, dim) order
//! ```
//!
//! Clips are written in ascending `clip_id` order.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::{EncoderError, FrameTokens};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"RVFE";
pub const EMBEDDING_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredClip {
    pub n_frames: usize,
    pub n_tokens: usize,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    d_model: usize,
    clips: BTreeMap<u64, StoredClip>,
}

impl EmbeddingStore {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            clips: BTreeMap::new(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Stores the frames of a clip, rounding to `f32`.
    pub fn insert(&mut self, clip_id: u64, frames: &[Array2<f64>]) -> Result<(), EncoderError> {
        let n_tokens = frames.first().map_or(0, Array2::nrows);
        let mut values = Vec::with_capacity(frames.len() * n_tokens * self.d_model);
        for f in frames {
            if f.ncols() != self.d_model {
                return Err(EncoderError::Dimension {
                    expected: self.d_model,
                    found: f.ncols(),
                });
            }
            if f.nrows() != n_tokens {
                return Err(EncoderError::Format(format!(
                    "clip {clip_id}: frames disagree on token count"
                )));
            }
            values.extend(f.iter().map(|&v| v as f32));
        }
        self.clips.insert(
            clip_id,
            StoredClip {
                n_frames: frames.len(),
                n_tokens,
                values,
            },
        );
        Ok(())
    }

    /// Stores one vector per clip (one frame, one token).
    pub fn insert_vector(&mut self, clip_id: u64, v: &[f64]) -> Result<(), EncoderError> {
        let row = Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape");
        self.insert(clip_id, std::slice::from_ref(&row))
    }

    pub fn clip(&self, clip_id: u64) -> Option<&StoredClip> {
        self.clips.get(&clip_id)
    }

    pub fn clip_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.clips.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &StoredClip)> {
        self.clips.iter().map(|(k, v)| (*k, v))
    }

    pub fn n_frames(&self, clip_id: u64) -> Option<usize> {
        self.clips.get(&clip_id).map(|c| c.n_frames)
    }

    pub fn frame(&self, clip_id: u64, position: usize) -> Result<FrameTokens, EncoderError> {
        let missing = EncoderError::Missing {
            clip_id,
            frame: position,
        };
        let clip = self.clips.get(&clip_id).ok_or(missing)?;
        if position >= clip.n_frames {
            return Err(EncoderError::Missing {
                clip_id,
                frame: position,
            });
        }
        let size = clip.n_tokens * self.d_model;
        let slice = &clip.values[position * size..(position + 1) * size];
        let tokens = Array2::from_shape_vec(
            (clip.n_tokens, self.d_model),
            slice.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("stored shape");
        FrameTokens::new(tokens)
    }

    pub fn frames(&self, clip_id: u64) -> Result<Vec<FrameTokens>, EncoderError> {
        let n = self.n_frames(clip_id).ok_or(EncoderError::Missing { clip_id, frame: 0 })?;
        (0..n).map(|p| self.frame(clip_id, p)).collect()
    }

    /// The single vector of a clip stored with one frame and one token.
    pub fn vector(&self, clip_id: u64) -> Result<Vec<f64>, EncoderError> {
        let clip = self
            .clips
            .get(&clip_id)
            .ok_or(EncoderError::Missing { clip_id, frame: 0 })?;
        if clip.n_frames != 1 || clip.n_tokens != 1 {
            return Err(EncoderError::Format(format!(
                "clip {clip_id} holds {}x{} tokens, not a single vector",
                clip.n_frames, clip.n_tokens
            )));
        }
        Ok(clip.values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), EncoderError> {
        let count = |n: usize, what: &str| {
            u32::try_from(n).map_err(|_| EncoderError::Format(format!("{what} exceeds u32")))
        };
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_u16::<LittleEndian>(EMBEDDING_VERSION)?;
        w.write_u32::<LittleEndian>(count(self.d_model, "d_model")?)?;
        w.write_u32::<LittleEndian>(count(self.clips.len(), "clip count")?)?;
        for (&id, clip) in &self.clips {
            w.write_u64::<LittleEndian>(id)?;
            w.write_u32::<LittleEndian>(count(clip.n_frames, "frame count")?)?;
            w.write_u32::<LittleEndian>(count(clip.n_tokens, "token count")?)?;
            for &v in &clip.values {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let mut r = Cursor::new(bytes);
        let need = |r: &Cursor<&[u8]>, n: usize| -> Result<(), EncoderError> {
            let offset = r.position() as usize;
            let left = bytes.len() - offset;
            if left < n {
                Err(EncoderError::Truncated {
                    offset,
                    needed: n - left,
                })
            } else {
                Ok(())
            }
        };
        need(&r, 14)?;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != EMBEDDING_MAGIC {
            return Err(EncoderError::Format(format!("bad magic {magic:?}")));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != EMBEDDING_VERSION {
            return Err(EncoderError::Format(format!("unsupported version {version}")));
        }
        let d_model = r.read_u32::<LittleEndian>()? as usize;
        let n_clips = r.read_u32::<LittleEndian>()?;
        let mut store = Self::new(d_model);
        for _ in 0..n_clips {
            need(&r, 16)?;
            let id = r.read_u64::<LittleEndian>()?;
            let n_frames = r.read_u32::<LittleEndian>()? as usize;
            let n_tokens = r.read_u32::<LittleEndian>()? as usize;
            let n = n_frames
                .checked_mul(n_tokens)
                .and_then(|v| v.checked_mul(d_model))
                .ok_or_else(|| EncoderError::Format("payload size overflows".into()))?;
            need(&r, n.saturating_mul(4))?;
            let mut values = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut values)?;
            if store
                .clips
                .insert(
                    id,
                    StoredClip {
                        n_frames,
                        n_tokens,
                        values,
                    },
                )
                .is_some()
            {
                return Err(EncoderError::Format(format!("duplicate clip {id}")));
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(EncoderError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.position() as usize
            )));
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<(), EncoderError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, EncoderError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Loads a store; alias used by the pipeline.
pub fn import_embeddings(path: &Path) -> Result<EmbeddingStore, EncoderError> {
    EmbeddingStore::read(path)
}
