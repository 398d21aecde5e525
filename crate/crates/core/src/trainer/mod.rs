//! Triplet training of the patch encoder (when trainable) and the recurrent
//! head.
//!
//! Each batch mines one hard triplet per anchor track with dropout off,
//! then recomputes the three embeddings of every triplet with dropout on,
//! averages the hinge losses over the batch and takes one optimizer step.
//! Per-triplet gradients are computed in parallel and summed in triplet
//! order, so results do not depend on the thread count.

mod optim;
mod schedule;

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{clip_global_norm, Optimizer, OptimizerKind};
pub use schedule::{lr_at, warmup_steps};

use crate::dataset::ClipIndex;
use crate::miner::{build_batch_for, eligible_anchors, epoch_plan, MinerError, TripletLogRow};
use crate::model::{Checkpoint, SeedLineage};
use crate::network::{ClipInputs, Network, NetworkError};
use crate::seed::stream;
use crate::tape::Mat;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Miner(#[from] MinerError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(
        "non-finite loss {loss} at epoch {epoch} batch {batch}: anchor {anchor}, positive {positive}, negative {negative}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        anchor: u64,
        positive: u64,
        negative: u64,
        loss: f64,
    },
    #[error("parameters became non-finite at epoch {epoch} batch {batch}")]
    NonFiniteParams { epoch: usize, batch: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Triplets per batch; one update per batch.
    pub batch_triplets: usize,
    pub margin: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    /// Fraction of one epoch spent in linear warmup.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub freeze_encoder: bool,
    /// Positive candidates per anchor.
    pub j: usize,
    /// Negative candidates per anchor.
    pub k: usize,
    pub checkpoint_epochs: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_triplets: 10,
            margin: 1.0,
            lr_start: 1e-4,
            lr_peak: 5e-4,
            lr_end: 1e-5,
            warmup_fraction: 0.05,
            seed: 0,
            freeze_encoder: false,
            j: 20,
            k: 20,
            checkpoint_epochs: vec![5, 10],
            optimizer: OptimizerKind::Sgd,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_triplets == 0 {
            return bad("epochs and batch_triplets must be at least 1");
        }
        if self.j < 2 || self.k < 1 {
            return bad("need j >= 2 positive and k >= 1 negative candidates");
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return bad("margin must be finite and non-negative");
        }
        let lrs = [self.lr_start, self.lr_peak, self.lr_end];
        if lrs.iter().any(|lr| !lr.is_finite() || *lr < 0.0) {
            return bad("learning rates must be finite and non-negative");
        }
        if self.lr_start > self.lr_peak || self.lr_end > self.lr_peak {
            return bad("lr_start and lr_end must not exceed lr_peak");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0 && m.is_finite())) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Fraction of triplets with positive loss.
    pub active_frac: f64,
    pub d_ap: f64,
    pub d_an: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub steps: Vec<StepStats>,
    pub epochs: Vec<EpochStats>,
    pub triplets: Vec<TripletLogRow>,
}

impl TrainStats {
    /// `step,epoch,lr,loss,active_frac,d_ap,d_an`
    pub fn write_steps_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        write_rows(w, &self.steps)
    }

    /// `epoch,steps,mean_loss,wall_seconds`; kept apart from the step log
    /// because wall time differs between otherwise identical runs.
    pub fn write_epochs_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        write_rows(w, &self.epochs)
    }

    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<(), TrainError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub stats: TrainStats,
    /// Snapshots after each requested epoch, in epoch order.
    pub checkpoints: Vec<(usize, Checkpoint)>,
    /// Whether encoder weights were updated.
    pub encoder_trained: bool,
}

/// Triplet-dropout stream for one pass.
fn role_stream(seed: u64, epoch: usize, batch: usize, triplet: usize, role: u64) -> crate::seed::StreamRng {
    stream(seed, "dropout", &[epoch as u64, batch as u64, triplet as u64, role])
}

pub fn train(
    index: &ClipIndex<'_>,
    inputs: &ClipInputs,
    network: Network,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<TrainOutcome, TrainError> {
    train_with(index, inputs, network, cfg, init_seed, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    index: &ClipIndex<'_>,
    inputs: &ClipInputs,
    mut network: Network,
    cfg: &TrainConfig,
    init_seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    network.check_inputs(inputs)?;
    let train_encoder = !cfg.freeze_encoder
        && network.encoder.as_ref().is_some_and(|e| e.config().trainable);
    let anchors = eligible_anchors(index)?;
    let steps_per_epoch = anchors.len().div_ceil(cfg.batch_triplets);
    let total_steps = steps_per_epoch * cfg.epochs;
    lr_at(0, steps_per_epoch, total_steps, cfg)?;

    let mut opt = Optimizer::new(cfg.optimizer, &network.trainable(train_encoder));
    let mut stats = TrainStats::default();
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let plan = epoch_plan(index, cfg.batch_triplets, &mut stream(cfg.seed, "epoch", &[epoch as u64]))?;
        let mut loss_sum = 0.0;
        for (b, batch_anchors) in plan.iter().enumerate() {
            let mut rng = stream(cfg.seed, "batch", &[epoch as u64, b as u64]);
            let batch = build_batch_for(index, batch_anchors, cfg.j, cfg.k, &mut rng, |ids| {
                network
                    .embed_many(inputs, ids)
                    .map_err(|e| MinerError::Embed(e.to_string()))
            })?;
            let net = &network;
            let results: Vec<_> = batch
                .triplets
                .par_iter()
                .enumerate()
                .map(|(t, mt)| {
                    let mut r = [0, 1, 2].map(|role| role_stream(cfg.seed, epoch, b, t, role));
                    let [ra, rp, rn] = &mut r;
                    let tr = mt.triplet;
                    net.triplet_gradients(
                        inputs,
                        [tr.anchor, tr.positive, tr.negative],
                        cfg.margin,
                        train_encoder,
                        [Some(ra), Some(rp), Some(rn)],
                    )
                })
                .collect();
            let n = results.len() as f64;
            let mut grads: Option<Vec<Mat>> = None;
            let (mut loss, mut active, mut d_ap, mut d_an) = (0.0, 0.0, 0.0, 0.0);
            for (mt, r) in batch.triplets.iter().zip(results) {
                let (terms, g) = r?;
                if !terms.loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: b,
                        anchor: mt.triplet.anchor,
                        positive: mt.triplet.positive,
                        negative: mt.triplet.negative,
                        loss: terms.loss,
                    });
                }
                loss += terms.loss;
                active += f64::from(u8::from(terms.is_active()));
                d_ap += terms.d_ap;
                d_an += terms.d_an;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&g) {
                            *a += g;
                        }
                    }
                }
                stats.triplets.push(TripletLogRow {
                    epoch,
                    batch: b,
                    anchor_clip: mt.triplet.anchor,
                    positive_clip: mt.triplet.positive,
                    negative_clip: mt.triplet.negative,
                    d_ap: mt.d_ap,
                    d_an: mt.d_an,
                });
            }
            let mut grads = grads.expect("batches are non-empty");
            for g in &mut grads {
                g.mapv_inplace(|x| x / n);
            }
            if let Some(max) = cfg.max_grad_norm {
                clip_global_norm(&mut grads, max);
            }
            let lr = lr_at(step, steps_per_epoch, total_steps, cfg)?;
            opt.step(&mut network.trainable_mut(train_encoder), &grads, lr);
            let finite = network.model.params().all_finite()
                && network.encoder.as_ref().is_none_or(|e| e.params().all_finite());
            if !finite {
                return Err(TrainError::NonFiniteParams { epoch, batch: b });
            }
            stats.steps.push(StepStats {
                step,
                epoch,
                lr,
                loss: loss / n,
                active_frac: active / n,
                d_ap: d_ap / n,
                d_an: d_an / n,
            });
            loss_sum += loss / n;
            step += 1;
        }
        let epoch_stats = EpochStats {
            epoch,
            steps: plan.len(),
            mean_loss: loss_sum / plan.len() as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&epoch_stats);
        stats.epochs.push(epoch_stats);
        if cfg.checkpoint_epochs.contains(&epoch) {
            checkpoints.push((
                epoch,
                Checkpoint {
                    model: network.model.clone(),
                    encoder: network.encoder.clone(),
                    lineage: SeedLineage {
                        init_seed,
                        train_seed: cfg.seed,
                        epoch,
                        step,
                    },
                },
            ));
        }
    }
    Ok(TrainOutcome {
        network,
        stats,
        checkpoints,
        encoder_trained: train_encoder,
    })
}
