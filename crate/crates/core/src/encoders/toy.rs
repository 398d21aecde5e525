use ndarray::{Array2, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{EncoderConfig, EncoderError, FrameTokens};
use crate::params::ParamStore;
use crate::tape::{Mat, Tape, Var};

/// Fixed sinusoidal offsets: even columns `sin(k / 10000^(2i/d))`, odd
/// columns the matching cosine.
pub fn sinusoidal_positions(n_tokens: usize, d_model: usize) -> Mat {
    Array2::from_shape_fn((n_tokens, d_model), |(k, j)| {
        let i = (j / 2) as f64;
        let angle = k as f64 / 10_000f64.powf(2.0 * i / d_model as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Non-overlapping square patches, linearly projected, plus positional
/// offsets. Patches are taken row by row over the grid and flattened in
/// (channel, row, column) order.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyPatchEncoder {
    cfg: EncoderConfig,
    params: ParamStore,
    positions: Mat,
}

impl ToyPatchEncoder {
    pub const WEIGHT: usize = 0;
    pub const BIAS: usize = 1;

    /// Projection weights ~ N(0, 0.02²), zero bias.
    pub fn init<R: Rng + ?Sized>(cfg: EncoderConfig, rng: &mut R) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let d = cfg.d_model;
        let weight = Array2::from_shape_fn((Self::patch_dim(&cfg), d), |_| normal.sample(rng));
        Self::with_weights(cfg, weight, Array2::zeros((1, d)))
    }

    pub fn with_weights(cfg: EncoderConfig, weight: Mat, bias: Mat) -> Result<Self, EncoderError> {
        cfg.validate()?;
        if weight.dim() != (Self::patch_dim(&cfg), cfg.d_model) || bias.dim() != (1, cfg.d_model) {
            return Err(EncoderError::InvalidConfig(
                "projection shapes do not match the config".into(),
            ));
        }
        let mut params = ParamStore::new();
        params.push("encoder.proj.weight", weight);
        params.push("encoder.proj.bias", bias);
        let grid = cfg.resize_to / cfg.patch_size;
        let positions = sinusoidal_positions(grid * grid, cfg.d_model);
        Ok(Self {
            cfg,
            params,
            positions,
        })
    }

    fn patch_dim(cfg: &EncoderConfig) -> usize {
        3 * cfg.patch_size * cfg.patch_size
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn positions(&self) -> &Mat {
        &self.positions
    }

    pub fn n_tokens(&self) -> usize {
        self.positions.nrows()
    }

    /// `n_tokens × patch_dim` matrix of flattened patches.
    pub fn patches(&self, frame: ArrayView3<'_, f32>) -> Result<Mat, EncoderError> {
        let r = self.cfg.resize_to;
        if frame.shape() != [3, r, r] {
            return Err(EncoderError::FrameShape {
                expected: [3, r, r],
                got: frame.shape().to_vec(),
            });
        }
        let p = self.cfg.patch_size;
        let grid = r / p;
        let mut out = Array2::zeros((grid * grid, Self::patch_dim(&self.cfg)));
        for gy in 0..grid {
            for gx in 0..grid {
                let mut row = out.row_mut(gy * grid + gx);
                let mut k = 0;
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            row[k] = f64::from(frame[[c, gy * p + dy, gx * p + dx]]);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn encode_patches(&self, patches: &Mat) -> Mat {
        patches.dot(self.params.get(Self::WEIGHT)) + self.params.get(Self::BIAS) + &self.positions
    }

    pub fn encode_frame(&self, frame: ArrayView3<'_, f32>) -> Result<FrameTokens, EncoderError> {
        FrameTokens::new(self.encode_patches(&self.patches(frame)?))
    }

    /// Records the projection on a tape; `weight`/`bias` are the leaves of
    /// this encoder's parameters.
    pub fn encode_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        weight: Var,
        bias: Var,
        patches: &'a Mat,
    ) -> Var {
        let x = tape.constant_ref(patches);
        let proj = tape.matmul(x, weight);
        let proj = tape.add_row(proj, bias);
        let pos = tape.constant_ref(&self.positions);
        tape.add(proj, pos)
    }
}
