//! The full clip embedder: optional patch encoder followed by the recurrent
//! head, plus the per-clip inputs it consumes.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::encoders::{EmbeddingStore, EncoderError, FrameTokens, ToyPatchEncoder};
use crate::ingest::{ClipPixels, ClipSpec};
use crate::model::{triplet_loss_on_tape, ModelError, RoVFModel, TripletTerms};
use crate::seed::StreamRng;
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("no inputs for clip {0}")]
    MissingClip(u64),
    #[error("incompatible network and inputs: {0}")]
    Mismatch(String),
    #[error("clip {clip_id}: {source}")]
    Encoder {
        clip_id: u64,
        source: EncoderError,
    },
    #[error("clip {clip_id}: {source}")]
    Model { clip_id: u64, source: ModelError },
}

/// What each clip is fed to the network as.
pub enum ClipInputs {
    /// Flattened patches of every frame, for the patch encoder.
    Patches(BTreeMap<u64, Vec<Mat>>),
    /// Stored per-frame tokens from an external backbone.
    Tokens(EmbeddingStore),
}

impl ClipInputs {
    pub fn from_pixels(
        encoder: &ToyPatchEncoder,
        clips: &[ClipSpec],
        pixels: &[ClipPixels],
    ) -> Result<Self, NetworkError> {
        let map = clips
            .par_iter()
            .zip(pixels)
            .map(|(clip, px)| {
                let frames = px
                    .outer_iter()
                    .map(|f| encoder.patches(f))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|source| NetworkError::Encoder {
                        clip_id: clip.clip_id,
                        source,
                    })?;
                Ok((clip.clip_id, frames))
            })
            .collect::<Result<BTreeMap<_, _>, NetworkError>>()?;
        Ok(ClipInputs::Patches(map))
    }

    pub fn contains(&self, clip_id: u64) -> bool {
        match self {
            ClipInputs::Patches(m) => m.contains_key(&clip_id),
            ClipInputs::Tokens(s) => s.clip(clip_id).is_some(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub model: RoVFModel,
    /// `None` when frames arrive as precomputed tokens.
    pub encoder: Option<ToyPatchEncoder>,
}

/// Leaves of one forward pass.
struct Bound {
    model: Vec<Var>,
    encoder: Option<(Var, Var)>,
}

impl Network {
    pub fn check_inputs(&self, inputs: &ClipInputs) -> Result<(), NetworkError> {
        let d = self.model.config().d_model;
        match (inputs, &self.encoder) {
            (ClipInputs::Patches(_), Some(e)) if e.config().d_model == d => Ok(()),
            (ClipInputs::Tokens(s), None) if s.d_model() == d => Ok(()),
            (ClipInputs::Patches(_), Some(e)) => Err(NetworkError::Mismatch(format!(
                "encoder width {} vs head width {d}",
                e.config().d_model
            ))),
            (ClipInputs::Tokens(s), None) => Err(NetworkError::Mismatch(format!(
                "stored tokens have width {} but the head expects {d}",
                s.d_model()
            ))),
            (ClipInputs::Patches(_), None) => {
                Err(NetworkError::Mismatch("pixel inputs need the patch encoder".into()))
            }
            (ClipInputs::Tokens(_), Some(_)) => Err(NetworkError::Mismatch(
                "precomputed tokens cannot pass through the patch encoder".into(),
            )),
        }
    }

    fn bind<'a>(&'a self, tape: &mut Tape<'a>, train_encoder: bool, grads: bool) -> Bound {
        let model = if grads {
            self.model.bind(tape)
        } else {
            self.model.params().values().iter().map(|v| tape.constant_ref(v)).collect()
        };
        let encoder = self.encoder.as_ref().map(|e| {
            let p = e.params();
            let w = p.get(ToyPatchEncoder::WEIGHT);
            let b = p.get(ToyPatchEncoder::BIAS);
            if grads && train_encoder {
                (tape.param(w), tape.param(b))
            } else {
                (tape.constant_ref(w), tape.constant_ref(b))
            }
        });
        Bound { model, encoder }
    }

    fn frame_vars<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &Bound,
        inputs: &'a ClipInputs,
        clip_id: u64,
    ) -> Result<Vec<Var>, NetworkError> {
        match inputs {
            ClipInputs::Patches(map) => {
                let encoder = self.encoder.as_ref().expect("checked");
                let (w, b) = bound.encoder.expect("checked");
                let frames = map.get(&clip_id).ok_or(NetworkError::MissingClip(clip_id))?;
                Ok(frames.iter().map(|p| encoder.encode_on_tape(tape, w, b, p)).collect())
            }
            ClipInputs::Tokens(store) => {
                let frames = store.frames(clip_id).map_err(|source| match source {
                    EncoderError::Missing { .. } => NetworkError::MissingClip(clip_id),
                    source => NetworkError::Encoder { clip_id, source },
                })?;
                Ok(frames
                    .into_iter()
                    .map(|f| tape.constant(f.into_tokens()))
                    .collect())
            }
        }
    }

    fn clip_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &Bound,
        inputs: &'a ClipInputs,
        clip_id: u64,
        rng: Option<&mut StreamRng>,
    ) -> Result<Var, NetworkError> {
        let frames = self.frame_vars(tape, bound, inputs, clip_id)?;
        self.model
            .forward_on_tape(tape, &bound.model, &frames, rng)
            .map_err(|source| NetworkError::Model { clip_id, source })
    }

    /// Embeds one clip; `rng` turns on dropout.
    pub fn embed_clip(
        &self,
        inputs: &ClipInputs,
        clip_id: u64,
        rng: Option<&mut StreamRng>,
    ) -> Result<Vec<f64>, NetworkError> {
        self.check_inputs(inputs)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false);
        let emb = self.clip_on_tape(&mut tape, &bound, inputs, clip_id, rng)?;
        Ok(tape.value(emb).iter().copied().collect())
    }

    /// Dropout-free embeddings of many clips, computed in parallel and
    /// returned in the order of `clip_ids`.
    pub fn embed_many(&self, inputs: &ClipInputs, clip_ids: &[u64]) -> Result<Vec<Vec<f64>>, NetworkError> {
        self.check_inputs(inputs)?;
        clip_ids
            .par_iter()
            .map(|&c| self.embed_clip(inputs, c, None))
            .collect()
    }

    /// Encoder tokens of every frame of a clip.
    pub fn frame_tokens(&self, inputs: &ClipInputs, clip_id: u64) -> Result<Vec<FrameTokens>, NetworkError> {
        match (inputs, &self.encoder) {
            (ClipInputs::Patches(map), Some(e)) => {
                let frames = map.get(&clip_id).ok_or(NetworkError::MissingClip(clip_id))?;
                frames
                    .iter()
                    .map(|p| FrameTokens::new(e.encode_patches(p)))
                    .collect::<Result<_, _>>()
                    .map_err(|source| NetworkError::Encoder { clip_id, source })
            }
            (ClipInputs::Tokens(s), _) => s
                .frames(clip_id)
                .map_err(|source| NetworkError::Encoder { clip_id, source }),
            (ClipInputs::Patches(_), None) => {
                Err(NetworkError::Mismatch("pixel inputs need the patch encoder".into()))
            }
        }
    }

    /// Number of trainable blocks, encoder blocks first.
    pub fn trainable_len(&self, train_encoder: bool) -> usize {
        let enc = if train_encoder && self.encoder.is_some() { 2 } else { 0 };
        enc + self.model.params().len()
    }

    /// Mutable trainable blocks in gradient order.
    pub fn trainable_mut(&mut self, train_encoder: bool) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = Vec::new();
        if train_encoder {
            if let Some(e) = self.encoder.as_mut() {
                out.extend(e.params_mut().values_mut().iter_mut());
            }
        }
        out.extend(self.model.params_mut().values_mut().iter_mut());
        out
    }

    /// Trainable blocks in gradient order.
    pub fn trainable(&self, train_encoder: bool) -> Vec<&Mat> {
        let mut out: Vec<&Mat> = Vec::new();
        if train_encoder {
            if let Some(e) = self.encoder.as_ref() {
                out.extend(e.params().values());
            }
        }
        out.extend(self.model.params().values());
        out
    }

    /// Loss of one triplet and its gradient with respect to every trainable
    /// block. `rngs` drive dropout for the anchor, positive and negative
    /// passes; `None` disables it.
    pub fn triplet_gradients(
        &self,
        inputs: &ClipInputs,
        clips: [u64; 3],
        margin: f64,
        train_encoder: bool,
        rngs: [Option<&mut StreamRng>; 3],
    ) -> Result<(TripletTerms, Vec<Mat>), NetworkError> {
        self.check_inputs(inputs)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, train_encoder, true);
        let mut embs = Vec::with_capacity(3);
        for (clip, rng) in clips.into_iter().zip(rngs) {
            embs.push(self.clip_on_tape(&mut tape, &bound, inputs, clip, rng)?);
        }
        let d_ap = tape.distance(embs[0], embs[1]);
        let d_an = tape.distance(embs[0], embs[2]);
        let loss = triplet_loss_on_tape(&mut tape, embs[0], embs[1], embs[2], margin);
        let terms = TripletTerms {
            d_ap: tape.scalar(d_ap),
            d_an: tape.scalar(d_an),
            loss: tape.scalar(loss),
        };
        let mut grads = tape.backward(loss);
        let mut vars = Vec::new();
        if train_encoder {
            if let Some((w, b)) = bound.encoder {
                vars.extend([w, b]);
            }
        }
        vars.extend(&bound.model);
        let out = vars
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Mat::zeros(tape.value(v).raw_dim()))
            })
            .collect();
        Ok((terms, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::model::{rovf_forward, Mode, RoVFConfig};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn token_net() -> (Network, ClipInputs) {
        let cfg = RoVFConfig {
            d_model: 4,
            n_latents: 2,
            n_layers: 1,
            n_heads: 2,
            dropout: 0.0,
            d_ff: 8,
            out_dim: 3,
        };
        let model = RoVFModel::init(cfg, 0).unwrap();
        let mut store = EmbeddingStore::new(4);
        let mut rng = StreamRng::seed_from_u64(1);
        for clip in 0..3u64 {
            let frames: Vec<_> = (0..2)
                .map(|_| Array2::from_shape_fn((3, 4), |_| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            store.insert(clip, &frames).unwrap();
        }
        (Network { model, encoder: None }, ClipInputs::Tokens(store))
    }

    #[test]
    fn embed_clip_matches_plain_forward() {
        let (net, inputs) = token_net();
        let ClipInputs::Tokens(store) = &inputs else { unreachable!() };
        let mut rng = StreamRng::seed_from_u64(0);
        let plain = rovf_forward(&net.model, &store.frames(1).unwrap(), Mode::Eval, &mut rng).unwrap();
        assert_eq!(net.embed_clip(&inputs, 1, None).unwrap(), plain);
        assert!(matches!(net.embed_clip(&inputs, 9, None), Err(NetworkError::MissingClip(9))));
    }

    #[test]
    fn gradients_cover_every_block() {
        let (net, inputs) = token_net();
        let (terms, grads) = net.triplet_gradients(&inputs, [0, 1, 2], 100.0, true, [None, None, None]).unwrap();
        assert!(terms.loss > 0.0);
        assert_eq!(grads.len(), net.trainable_len(true));
        for (g, p) in grads.iter().zip(net.trainable(true)) {
            assert_eq!(g.dim(), p.dim());
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (net, inputs) = token_net();
        let mut rng = StreamRng::seed_from_u64(0);
        let ecfg = EncoderConfig { d_model: 4, resize_to: 8, patch_size: 4, ..Default::default() };
        let enc = ToyPatchEncoder::init(ecfg, &mut rng).unwrap();
        let with_enc = Network { encoder: Some(enc), ..net };
        assert!(matches!(with_enc.embed_clip(&inputs, 0, None), Err(NetworkError::Mismatch(_))));
    }
}
