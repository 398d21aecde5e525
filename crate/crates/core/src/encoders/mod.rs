//! Frame encoders.
//!
//! Two interchangeable sources of per-frame tokens feed the recurrent head:
//! a small trainable patch encoder working on cropped pixels, and a store of
//! precomputed tokens exported from an external backbone. The averaging
//! baseline collapses tokens into a video embedding without any learning.

mod store;
mod toy;

use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

pub use store::{import_embeddings, EmbeddingStore, StoredClip, EMBEDDING_MAGIC, EMBEDDING_VERSION};
pub use toy::{sinusoidal_positions, ToyPatchEncoder};

use crate::tape::Mat;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("frame shape {got:?} does not match encoder input {expected:?}")]
    FrameShape { expected: [usize; 3], got: Vec<usize> },
    #[error("no stored tokens for clip {clip_id} frame {frame}")]
    Missing { clip_id: u64, frame: usize },
    #[error("embedding file: {0}")]
    Format(String),
    #[error("embedding file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("tokens must be finite and non-empty")]
    InvalidTokens,
    #[error("{0}")]
    Empty(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tokens of one frame: `n_tokens × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTokens {
    tokens: Mat,
}

impl FrameTokens {
    pub fn new(tokens: Mat) -> Result<Self, EncoderError> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 || !tokens.iter().all(|v| v.is_finite()) {
            return Err(EncoderError::InvalidTokens);
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Mat {
        &self.tokens
    }

    pub fn into_tokens(self) -> Mat {
        self.tokens
    }

    pub fn d_model(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ToyPatch,
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub patch_size: usize,
    pub d_model: usize,
    pub trainable: bool,
    /// Side of the square input frames; only used by the patch encoder.
    pub resize_to: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::ToyPatch,
            patch_size: 16,
            d_model: 768,
            trainable: true,
            resize_to: 224,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        if self.kind == EncoderKind::ToyPatch {
            if self.patch_size == 0 || self.resize_to == 0 {
                return bad("patch_size and resize_to must be positive".into());
            }
            if !self.resize_to.is_multiple_of(self.patch_size) {
                return bad(format!(
                    "resize_to {} is not divisible by patch_size {}",
                    self.resize_to, self.patch_size
                ));
            }
        }
        Ok(())
    }
}

/// What an encoder is asked to encode.
#[derive(Clone, Copy, Debug)]
pub enum FrameRef<'a> {
    /// `3 × resize_to × resize_to` pixels.
    Pixels(ArrayView3<'a, f32>),
    /// Stored tokens of a clip at a frame position.
    Stored { clip_id: u64, position: usize },
}

pub enum Encoder {
    Toy(ToyPatchEncoder),
    Precomputed(EmbeddingStore),
}

impl Encoder {
    pub fn d_model(&self) -> usize {
        match self {
            Encoder::Toy(e) => e.config().d_model,
            Encoder::Precomputed(s) => s.d_model(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Encoder::Toy(e) if e.config().trainable)
    }

    pub fn encode_frame(&self, frame: FrameRef<'_>) -> Result<FrameTokens, EncoderError> {
        match (self, frame) {
            (Encoder::Toy(e), FrameRef::Pixels(px)) => e.encode_frame(px),
            (Encoder::Precomputed(s), FrameRef::Stored { clip_id, position }) => {
                s.frame(clip_id, position)
            }
            (Encoder::Toy(_), FrameRef::Stored { .. }) => Err(EncoderError::InvalidConfig(
                "patch encoder needs pixels, not stored tokens".into(),
            )),
            (Encoder::Precomputed(_), FrameRef::Pixels(_)) => Err(EncoderError::InvalidConfig(
                "precomputed encoder cannot encode pixels".into(),
            )),
        }
    }
}

/// Mean over tokens within each frame, then over frames.
///
/// Each mean sums its terms in ascending value order, so the result is
/// bitwise identical under any reordering of tokens or frames.
pub fn average_baseline(frames: &[FrameTokens]) -> Result<Vec<f64>, EncoderError> {
    let first = frames
        .first()
        .ok_or(EncoderError::Empty("average of an empty frame sequence"))?;
    let d = first.d_model();
    let mut frame_means = Array2::<f64>::zeros((frames.len(), d));
    for (f, frame) in frames.iter().enumerate() {
        if frame.d_model() != d {
            return Err(EncoderError::Dimension {
                expected: d,
                found: frame.d_model(),
            });
        }
        for (j, col) in frame.tokens().columns().into_iter().enumerate() {
            frame_means[[f, j]] = canonical_mean(col.iter().copied());
        }
    }
    Ok(frame_means
        .columns()
        .into_iter()
        .map(|col| canonical_mean(col.iter().copied()))
        .collect())
}

/// Frame-level reference: the averaging baseline over the first frame only.
pub fn first_frame_baseline(frames: &[FrameTokens]) -> Result<Vec<f64>, EncoderError> {
    average_baseline(&frames[..frames.len().min(1)])
}

fn canonical_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use proptest::prelude::*;

    fn ft(m: Mat) -> FrameTokens {
        FrameTokens::new(m).unwrap()
    }

    #[test]
    fn single_token_is_identity() {
        let v = array![[0.1, -2.0, 3.5]];
        assert_eq!(average_baseline(&[ft(v.clone())]).unwrap(), v.row(0).to_vec());
    }

    #[test]
    fn two_frames_average_their_token_means() {
        let a = array![[1.0, 2.0], [3.0, 4.0]]; // mean (2, 3)
        let b = array![[10.0, -1.0]];
        assert_eq!(average_baseline(&[ft(a), ft(b)]).unwrap(), vec![6.0, 1.0]);
    }

    #[test]
    fn errors_on_empty_and_mixed_dims() {
        assert!(average_baseline(&[]).is_err());
        let err = average_baseline(&[ft(array![[1.0]]), ft(array![[1.0, 2.0]])]).unwrap_err();
        assert!(matches!(err, EncoderError::Dimension { .. }));
        assert!(FrameTokens::new(array![[f64::NAN]]).is_err());
    }

    #[test]
    fn first_frame_baseline_ignores_later_frames() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[10.0, -1.0]];
        assert_eq!(first_frame_baseline(&[ft(a), ft(b)]).unwrap(), vec![2.0, 3.0]);
        assert!(first_frame_baseline(&[]).is_err());
    }

    #[test]
    fn config_checks_patch_divisibility() {
        let cfg = EncoderConfig {
            resize_to: 30,
            patch_size: 8,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            vals in prop::collection::vec(-1e3f64..1e3, 4 * 3 * 5),
            frame_perm in Just(vec![2usize, 0, 3, 1]).prop_shuffle(),
            token_perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
        ) {
            let frames: Vec<Mat> = vals
                .chunks(15)
                .map(|c| Array2::from_shape_vec((3, 5), c.to_vec()).unwrap())
                .collect();
            let reference = average_baseline(&frames.iter().cloned().map(ft).collect::<Vec<_>>()).unwrap();
            let shuffled: Vec<FrameTokens> = frame_perm
                .iter()
                .map(|&f| ft(frames[f].select(Axis(0), &token_perm)))
                .collect();
            prop_assert_eq!(average_baseline(&shuffled).unwrap(), reference);
        }
    }
}
