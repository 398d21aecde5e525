//! The recurrent latent-array head.
//!
//! The hidden state is a small set of latent vectors. For every frame the
//! latents query the frame tokens through cross-attention, then refine
//! themselves through pre-norm self-attention/feedforward layers; the video
//! embedding is the output projection of the mean latent row. Only the
//! embedding after the last frame is used.
//!
//! ```text
//! tokens ─ dropout ─ LN ─┐
//! latent ──── LN ──── cross-attn ─ dropout ─(+)─► [LN ─ self-attn ─ dropout ─(+)
//!   │                                        ▲      LN ─ FF(GELU) ─ dropout ─(+)] × n_layers
//!   └────────────────────────────────────────┘                         │
//!                                               mean rows ─ linear ─► embedding
//! ```
//!
//! Dropout sits on the incoming frame tokens, on attention weights, after
//! each attention block, inside the feedforward after the activation, and
//! after the feedforward, and is active only in [`Mode::Train`].

mod checkpoint;
mod loss;

use ndarray::Array2;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointError, SeedLineage, CHECKPOINT_MAGIC};
pub use loss::{triplet_loss, triplet_loss_on_tape, TripletTerms};

use crate::encoders::FrameTokens;
use crate::params::ParamStore;
use crate::seed::StreamRng;
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("clip has no frames")]
    EmptyClip,
    #[error("non-finite input")]
    NonFinite,
    #[error("parameters do not match the config: {0}")]
    Params(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoVFConfig {
    pub d_model: usize,
    pub n_latents: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub d_ff: usize,
    pub out_dim: usize,
}

impl Default for RoVFConfig {
    fn default() -> Self {
        Self {
            d_model: 768,
            n_latents: 32,
            n_layers: 2,
            n_heads: 8,
            dropout: 0.1,
            d_ff: 4 * 768,
            out_dim: 768,
        }
    }
}

impl RoVFConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if [self.d_model, self.n_latents, self.n_layers, self.n_heads, self.d_ff, self.out_dim]
            .contains(&0)
        {
            return bad("all sizes and counts must be at least 1".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    norm1: (usize, usize),
    attn: AttnIdx,
    norm2: (usize, usize),
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Positions of every block in the parameter store.
#[derive(Clone, Debug)]
struct Layout {
    latent: usize,
    norm_latent: (usize, usize),
    norm_frame: (usize, usize),
    cross: AttnIdx,
    layers: Vec<LayerIdx>,
    out_w: usize,
    out_b: usize,
}

struct Skeleton {
    blocks: Vec<(String, (usize, usize), Init)>,
}

impl Skeleton {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.blocks.push((name, shape, init));
        self.blocks.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.gain"), (1, d), Init::Ones),
            self.add(format!("{prefix}.bias"), (1, d), Init::Zeros),
        )
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.weight"), (din, dout), Init::Normal),
            self.add(format!("{prefix}.bias"), (1, dout), Init::Zeros),
        )
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let (wq, bq) = self.linear(&format!("{prefix}.q"), d, d);
        let (wk, bk) = self.linear(&format!("{prefix}.k"), d, d);
        let (wv, bv) = self.linear(&format!("{prefix}.v"), d, d);
        let (wo, bo) = self.linear(&format!("{prefix}.o"), d, d);
        AttnIdx {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn build(cfg: &RoVFConfig) -> (Self, Layout) {
        let d = cfg.d_model;
        let mut s = Skeleton { blocks: Vec::new() };
        let latent = s.add("latent".into(), (cfg.n_latents, d), Init::Normal);
        let norm_latent = s.norm("cross.norm_latent", d);
        let norm_frame = s.norm("cross.norm_frame", d);
        let cross = s.attention("cross.attn", d);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let norm1 = s.norm(&format!("layers.{l}.norm1"), d);
                let attn = s.attention(&format!("layers.{l}.attn"), d);
                let norm2 = s.norm(&format!("layers.{l}.norm2"), d);
                let (w1, b1) = s.linear(&format!("layers.{l}.ff1"), d, cfg.d_ff);
                let (w2, b2) = s.linear(&format!("layers.{l}.ff2"), cfg.d_ff, d);
                LayerIdx {
                    norm1,
                    attn,
                    norm2,
                    w1,
                    b1,
                    w2,
                    b2,
                }
            })
            .collect();
        let (out_w, out_b) = s.linear("out", d, cfg.out_dim);
        let layout = Layout {
            latent,
            norm_latent,
            norm_frame,
            cross,
            layers,
            out_w,
            out_b,
        };
        (s, layout)
    }
}

/// Recurrent hidden state: the latent array.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub latent: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoVFModel {
    cfg: RoVFConfig,
    params: ParamStore,
    layout: Layout,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.latent == other.latent && self.out_w == other.out_w
    }
}

/// Draws a model: weight matrices and the initial latent array from
/// N(0, 0.02²) in block order, normalization gains 1, all biases 0.
pub fn init_model(cfg: &RoVFConfig, seed: u64) -> Result<RoVFModel, ModelError> {
    RoVFModel::init(cfg.clone(), seed)
}

impl RoVFModel {
    pub const INIT_STD: f64 = 0.02;

    pub fn init(cfg: RoVFConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (skeleton, layout) = Skeleton::build(&cfg);
        let mut rng = StreamRng::seed_from_u64(seed);
        let normal = Normal::new(0.0, Self::INIT_STD).expect("valid std");
        let mut params = ParamStore::new();
        for (name, shape, init) in skeleton.blocks {
            let value = match init {
                Init::Normal => Array2::from_shape_fn(shape, |_| normal.sample(&mut rng)),
                Init::Zeros => Array2::zeros(shape),
                Init::Ones => Array2::ones(shape),
            };
            params.push(name, value);
        }
        Ok(Self {
            cfg,
            params,
            layout,
        })
    }

    /// Rebuilds a model from named blocks, checking names and shapes.
    pub fn from_params(cfg: RoVFConfig, params: ParamStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (skeleton, layout) = Skeleton::build(&cfg);
        if skeleton.blocks.len() != params.len() {
            return Err(ModelError::Params(format!(
                "expected {} blocks, found {}",
                skeleton.blocks.len(),
                params.len()
            )));
        }
        for (i, (name, shape, _)) in skeleton.blocks.iter().enumerate() {
            if params.name(i) != name || params.get(i).dim() != *shape {
                return Err(ModelError::Params(format!(
                    "block {i}: expected {name} {shape:?}, found {} {:?}",
                    params.name(i),
                    params.get(i).dim()
                )));
            }
        }
        if !params.all_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(Self {
            cfg,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &RoVFConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn initial_state(&self) -> HiddenState {
        HiddenState {
            latent: self.params.get(self.layout.latent).clone(),
        }
    }

    /// Leaves for every parameter, in store order.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.params.values().iter().map(|v| tape.param(v)).collect()
    }

    /// The initial latent array as bound by [`RoVFModel::bind`].
    pub fn initial_latent(&self, vars: &[Var]) -> Var {
        vars[self.layout.latent]
    }

    fn attention(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        idx: &AttnIdx,
        query_in: Var,
        kv_in: Var,
        rng: &mut Option<&mut StreamRng>,
    ) -> Var {
        let linear = |tape: &mut Tape<'_>, x: Var, w: usize, b: usize| {
            let y = tape.matmul(x, vars[w]);
            tape.add_row(y, vars[b])
        };
        let q = linear(tape, query_in, idx.wq, idx.bq);
        let k = linear(tape, kv_in, idx.wk, idx.bk);
        let v = linear(tape, kv_in, idx.wv, idx.bv);
        let heads = self.cfg.n_heads;
        let dh = self.cfg.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let outputs: Vec<Var> = (0..heads)
            .map(|h| {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice_cols(q, h * dh, dh),
                        tape.slice_cols(k, h * dh, dh),
                        tape.slice_cols(v, h * dh, dh),
                    )
                };
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, scale);
                let weights = tape.softmax_rows(scores);
                let weights = tape.dropout(weights, self.cfg.dropout, rng.as_deref_mut());
                tape.matmul(weights, vh)
            })
            .collect();
        let joined = if heads == 1 {
            outputs[0]
        } else {
            tape.concat_cols(&outputs)
        };
        linear(tape, joined, idx.wo, idx.bo)
    }

    /// One recurrence step on a tape: returns the next latent array and the
    /// embedding read out from it. `rng` enables dropout.
    pub fn step_on_tape(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        latent: Var,
        tokens: Var,
        mut rng: Option<&mut StreamRng>,
    ) -> (Var, Var) {
        let p = self.cfg.dropout;
        let l = &self.layout;
        let tokens = tape.dropout(tokens, p, rng.as_deref_mut());
        let q_in = tape.layer_norm(latent, vars[l.norm_latent.0], vars[l.norm_latent.1]);
        let kv_in = tape.layer_norm(tokens, vars[l.norm_frame.0], vars[l.norm_frame.1]);
        let cross = self.attention(tape, vars, &l.cross, q_in, kv_in, &mut rng);
        let cross = tape.dropout(cross, p, rng.as_deref_mut());
        let mut latent = tape.add(latent, cross);
        for layer in &l.layers {
            let x = tape.layer_norm(latent, vars[layer.norm1.0], vars[layer.norm1.1]);
            let sa = self.attention(tape, vars, &layer.attn, x, x, &mut rng);
            let sa = tape.dropout(sa, p, rng.as_deref_mut());
            latent = tape.add(latent, sa);
            let x = tape.layer_norm(latent, vars[layer.norm2.0], vars[layer.norm2.1]);
            let h = tape.matmul(x, vars[layer.w1]);
            let h = tape.add_row(h, vars[layer.b1]);
            let h = tape.gelu(h);
            let h = tape.dropout(h, p, rng.as_deref_mut());
            let h = tape.matmul(h, vars[layer.w2]);
            let h = tape.add_row(h, vars[layer.b2]);
            let h = tape.dropout(h, p, rng.as_deref_mut());
            latent = tape.add(latent, h);
        }
        let pooled = tape.mean_rows(latent);
        let emb = tape.matmul(pooled, vars[l.out_w]);
        let emb = tape.add_row(emb, vars[l.out_b]);
        (latent, emb)
    }

    /// Folds the recurrence over frame token nodes, starting from the
    /// learned initial latent array; returns the last embedding node.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        frames: &[Var],
        mut rng: Option<&mut StreamRng>,
    ) -> Result<Var, ModelError> {
        let mut latent = self.initial_latent(vars);
        let mut emb = None;
        for &f in frames {
            let d = tape.value(f).ncols();
            if d != self.cfg.d_model {
                return Err(ModelError::Dimension {
                    expected: self.cfg.d_model,
                    found: d,
                });
            }
            let (next, e) = self.step_on_tape(tape, vars, latent, f, rng.as_deref_mut());
            latent = next;
            emb = Some(e);
        }
        emb.ok_or(ModelError::EmptyClip)
    }
}

fn mode_rng(mode: Mode, rng: &mut StreamRng) -> Option<&mut StreamRng> {
    match mode {
        Mode::Train => Some(rng),
        Mode::Eval => None,
    }
}

/// Advances the hidden state by one frame and returns the embedding read
/// out from the new state.
pub fn rovf_step(
    model: &RoVFModel,
    h: &HiddenState,
    frame: &FrameTokens,
    mode: Mode,
    rng: &mut StreamRng,
) -> Result<(HiddenState, Vec<f64>), ModelError> {
    let cfg = model.config();
    if frame.d_model() != cfg.d_model {
        return Err(ModelError::Dimension {
            expected: cfg.d_model,
            found: frame.d_model(),
        });
    }
    if h.latent.dim() != (cfg.n_latents, cfg.d_model) {
        return Err(ModelError::Dimension {
            expected: cfg.n_latents * cfg.d_model,
            found: h.latent.len(),
        });
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let latent = tape.constant_ref(&h.latent);
    let tokens = tape.constant_ref(frame.tokens());
    let (next, emb) = model.step_on_tape(&mut tape, &vars, latent, tokens, mode_rng(mode, rng));
    Ok((
        HiddenState {
            latent: tape.value(next).clone(),
        },
        tape.value(emb).iter().copied().collect(),
    ))
}

/// Embeds a clip: the embedding emitted after its last frame.
pub fn rovf_forward(
    model: &RoVFModel,
    clip: &[FrameTokens],
    mode: Mode,
    rng: &mut StreamRng,
) -> Result<Vec<f64>, ModelError> {
    if clip.is_empty() {
        return Err(ModelError::EmptyClip);
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let frames: Vec<Var> = clip.iter().map(|f| tape.constant_ref(f.tokens())).collect();
    let emb = model.forward_on_tape(&mut tape, &vars, &frames, mode_rng(mode, rng))?;
    Ok(tape.value(emb).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::euclidean;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tiny() -> RoVFConfig {
        RoVFConfig {
            d_model: 8,
            n_latents: 4,
            n_layers: 2,
            n_heads: 2,
            dropout: 0.1,
            d_ff: 16,
            out_dim: 6,
        }
    }

    fn random_frame(rng: &mut StreamRng, tokens: usize, d: usize) -> FrameTokens {
        FrameTokens::new(Array2::from_shape_fn((tokens, d), |_| rng.sample(StandardNormal))).unwrap()
    }

    fn scaled(cfg: RoVFConfig, seed: u64, std: f64) -> RoVFModel {
        let mut m = RoVFModel::init(cfg, seed).unwrap();
        let mut rng = StreamRng::seed_from_u64(seed ^ 0xabc);
        for v in m.params_mut().values_mut() {
            v.mapv_inplace(|x| x + std * rng.sample::<f64, _>(StandardNormal));
        }
        m
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = init_model(&tiny(), 1).unwrap();
        assert_eq!(a, init_model(&tiny(), 1).unwrap());
        assert_ne!(a.params(), init_model(&tiny(), 2).unwrap().params());
        let gain = a.params().index_of("layers.1.norm2.gain").unwrap();
        assert!(a.params().get(gain).iter().all(|&g| g == 1.0));
        let bias = a.params().index_of("out.bias").unwrap();
        assert!(a.params().get(bias).iter().all(|&b| b == 0.0));
    }

    #[test]
    fn head_divisibility_is_enforced() {
        let cfg = RoVFConfig {
            d_model: 6,
            n_heads: 4,
            ..tiny()
        };
        assert!(matches!(init_model(&cfg, 0), Err(ModelError::InvalidConfig(_))));
        assert!(init_model(&RoVFConfig { dropout: 1.0, ..tiny() }, 0).is_err());
        assert!(init_model(&RoVFConfig { n_latents: 0, ..tiny() }, 0).is_err());
    }

    #[test]
    fn eval_step_is_deterministic() {
        let model = scaled(tiny(), 3, 0.3);
        let mut rng = StreamRng::seed_from_u64(0);
        let frame = random_frame(&mut rng, 5, 8);
        let h = model.initial_state();
        let a = rovf_step(&model, &h, &frame, Mode::Eval, &mut rng).unwrap();
        let b = rovf_step(&model, &h, &frame, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a, b);
        let (_, emb) = rovf_step(&model, &h, &frame, Mode::Train, &mut rng).unwrap();
        assert_ne!(emb, a.1, "train mode applies dropout");
    }

    #[test]
    fn zeroed_cross_values_block_frame_content() {
        let mut model = scaled(tiny(), 4, 0.3);
        for name in ["cross.attn.v.weight", "cross.attn.v.bias", "cross.attn.o.weight", "cross.attn.o.bias"] {
            let i = model.params().index_of(name).unwrap();
            model.params_mut().get_mut(i).fill(0.0);
        }
        let mut rng = StreamRng::seed_from_u64(1);
        let h = model.initial_state();
        let a = rovf_step(&model, &h, &random_frame(&mut rng, 3, 8), Mode::Eval, &mut rng).unwrap();
        let b = rovf_step(&model, &h, &random_frame(&mut rng, 7, 8), Mode::Eval, &mut rng).unwrap();
        assert_eq!(a, b);
        // and equals running only the self-attention stack on the latent
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let zero_tokens = tape.constant(Array2::zeros((1, 8)));
        let lat = model.initial_latent(&vars);
        let (next, _) = model.step_on_tape(&mut tape, &vars, lat, zero_tokens, None);
        assert_eq!(tape.value(next), &a.0.latent);
    }

    #[test]
    fn embedding_has_out_dim() {
        let cfg = RoVFConfig {
            d_model: 16,
            n_heads: 4,
            out_dim: 768,
            ..tiny()
        };
        let model = init_model(&cfg, 0).unwrap();
        let mut rng = StreamRng::seed_from_u64(0);
        let (_, emb) = rovf_step(&model, &model.initial_state(), &random_frame(&mut rng, 2, 16), Mode::Eval, &mut rng).unwrap();
        assert_eq!(emb.len(), 768);
    }

    #[test]
    fn single_frame_forward_equals_one_step() {
        let model = scaled(tiny(), 5, 0.3);
        let mut rng = StreamRng::seed_from_u64(2);
        let frame = random_frame(&mut rng, 4, 8);
        let emb = rovf_forward(&model, std::slice::from_ref(&frame), Mode::Eval, &mut rng).unwrap();
        let (_, step) = rovf_step(&model, &model.initial_state(), &frame, Mode::Eval, &mut rng).unwrap();
        assert_eq!(emb, step);
        assert!(matches!(rovf_forward(&model, &[], Mode::Eval, &mut rng), Err(ModelError::EmptyClip)));
    }

    #[test]
    fn forward_folds_steps_in_order() {
        let model = scaled(tiny(), 6, 0.3);
        let mut rng = StreamRng::seed_from_u64(3);
        let clip: Vec<_> = (0..3).map(|_| random_frame(&mut rng, 3, 8)).collect();
        let mut h = model.initial_state();
        let mut last = vec![];
        for f in &clip {
            let (next, emb) = rovf_step(&model, &h, f, Mode::Eval, &mut rng).unwrap();
            h = next;
            last = emb;
        }
        assert_eq!(rovf_forward(&model, &clip, Mode::Eval, &mut rng).unwrap(), last);
    }

    #[test]
    fn frame_order_matters() {
        let model = scaled(tiny(), 7, 0.3);
        let mut rng = StreamRng::seed_from_u64(4);
        let clip: Vec<_> = (0..3).map(|_| random_frame(&mut rng, 3, 8)).collect();
        let reversed: Vec<_> = clip.iter().rev().cloned().collect();
        let a = rovf_forward(&model, &clip, Mode::Eval, &mut rng).unwrap();
        let b = rovf_forward(&model, &reversed, Mode::Eval, &mut rng).unwrap();
        assert!(euclidean(&a, &b) > 0.0);
    }

    #[test]
    fn no_state_leaks_between_clips() {
        let model = scaled(tiny(), 8, 0.3);
        let mut rng = StreamRng::seed_from_u64(5);
        let a: Vec<_> = (0..2).map(|_| random_frame(&mut rng, 3, 8)).collect();
        let b: Vec<_> = (0..2).map(|_| random_frame(&mut rng, 3, 8)).collect();
        let first = rovf_forward(&model, &a, Mode::Eval, &mut rng).unwrap();
        rovf_forward(&model, &b, Mode::Eval, &mut rng).unwrap();
        assert_eq!(rovf_forward(&model, &a, Mode::Eval, &mut rng).unwrap(), first);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let model = init_model(&tiny(), 0).unwrap();
        let mut rng = StreamRng::seed_from_u64(0);
        let frame = random_frame(&mut rng, 2, 4);
        assert!(matches!(
            rovf_step(&model, &model.initial_state(), &frame, Mode::Eval, &mut rng),
            Err(ModelError::Dimension { expected: 8, found: 4 })
        ));
    }

    #[test]
    fn from_params_checks_blocks() {
        let model = init_model(&tiny(), 0).unwrap();
        let back = RoVFModel::from_params(tiny(), model.params().clone()).unwrap();
        assert_eq!(back, model);
        let other = RoVFConfig { n_layers: 1, ..tiny() };
        assert!(RoVFModel::from_params(other, model.params().clone()).is_err());
    }

    #[test]
    fn outputs_stay_finite() {
        let mut rng = StreamRng::seed_from_u64(9);
        for trial in 0..10_000u64 {
            let model = if trial % 1000 == 0 {
                scaled(tiny(), trial, 1.0)
            } else {
                init_model(&tiny(), trial % 7).unwrap()
            };
            let n = rng.random_range(1..3);
            let scale = 10f64.powi(rng.random_range(-3..4));
            let clip: Vec<_> = (0..n)
                .map(|_| {
                    let tokens = rng.random_range(1..5);
                    let f = random_frame(&mut rng, tokens, 8);
                    FrameTokens::new(f.tokens() * scale).unwrap()
                })
                .collect();
            let mode = if trial % 2 == 0 { Mode::Train } else { Mode::Eval };
            let emb = rovf_forward(&model, &clip, mode, &mut rng).unwrap();
            assert!(emb.iter().all(|v| v.is_finite()), "trial {trial}");
        }
    }
}
