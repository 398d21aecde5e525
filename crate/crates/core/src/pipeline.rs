//! End-to-end composition: synthetic data, ingestion, network setup,
//! training, embedding and evaluation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config_file::{ConfigError, KeyValues};
use crate::dataset::ClipIndex;
use crate::encoders::{average_baseline, EmbeddingStore, EncoderConfig, EncoderKind, ToyPatchEncoder};
use crate::eval::{evaluate, generate_eval_sets, EvalReport, EvalSets, OverlapFilter};
use crate::ingest::synth::{Presence, SynthConfig, SynthFrames, SynthWorld};
use crate::ingest::{crop_all, ingest, ClipManifest, FrameSource, IngestConfig};
use crate::model::{RoVFConfig, RoVFModel};
use crate::network::{ClipInputs, Network};
use crate::seed::{derive, stream};
use crate::trainer::{train_with, EpochStats, OptimizerKind, TrainConfig, TrainOutcome};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_identities: usize,
    pub train_videos: u32,
    pub test_videos: u32,
    pub duration_s: u32,
    pub min_visible: u32,
    pub max_visible: u32,
    pub min_gap: u32,
    pub max_gap: u32,
    pub occlusion_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_identities: 10,
            train_videos: 2,
            test_videos: 1,
            duration_s: 240,
            min_visible: 30,
            max_visible: 90,
            min_gap: 5,
            max_gap: 30,
            occlusion_rate: 0.0,
        }
    }
}

/// Training and held-out videos of one synthetic population.
pub struct SynthDataset {
    pub train: SynthFrames,
    pub test: SynthFrames,
}

/// Videos `0..train_videos` are for training, the following
/// `test_videos` ids are held out.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> SynthDataset {
    let cfg = SynthConfig {
        presence: Some(Presence {
            min_visible: spec.min_visible,
            max_visible: spec.max_visible,
            min_gap: spec.min_gap,
            max_gap: spec.max_gap,
        }),
        occlusion_rate: spec.occlusion_rate,
        ..SynthConfig::new(spec.n_identities, seed)
    };
    let world = SynthWorld::new(cfg);
    let train: Vec<_> = (0..spec.train_videos).map(|v| world.video(v, spec.duration_s)).collect();
    let test: Vec<_> = (spec.train_videos..spec.train_videos + spec.test_videos)
        .map(|v| world.video(v, spec.duration_s))
        .collect();
    SynthDataset {
        train: SynthFrames::new(world.clone(), train),
        test: SynthFrames::new(world, test),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_sets: usize,
    /// Enables the positive-overlap filter when set.
    pub max_iou: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_sets: 100,
            max_iou: None,
        }
    }
}

impl EvalConfig {
    pub fn filter(&self) -> Option<OverlapFilter> {
        self.max_iou.map(|max_iou| OverlapFilter { max_iou })
    }
}

/// Every tunable of a run, grouped by stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub synth: SynthSpec,
    pub ingest: IngestConfig,
    pub encoder: EncoderConfig,
    pub model: RoVFConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Small enough to train on a laptop CPU in minutes: 32 px crops cut
    /// into 8 px patches (16 tokens of width 32) and a 2-layer head, trained
    /// with Adam on twelve synthetic videos.
    pub fn desk() -> Self {
        Self {
            synth: SynthSpec {
                train_videos: 12,
                ..Default::default()
            },
            ingest: IngestConfig {
                resize_to: 32,
                ..Default::default()
            },
            encoder: EncoderConfig {
                kind: EncoderKind::ToyPatch,
                patch_size: 8,
                d_model: 32,
                trainable: true,
                resize_to: 32,
            },
            model: RoVFConfig {
                d_model: 32,
                n_latents: 8,
                n_layers: 2,
                n_heads: 4,
                // Dropout at this width stalls learning within five epochs.
                dropout: 0.0,
                d_ff: 64,
                out_dim: 32,
            },
            train: TrainConfig {
                epochs: 5,
                checkpoint_epochs: vec![5],
                optimizer: OptimizerKind::Adam,
                lr_start: 1e-3,
                lr_peak: 5e-3,
                lr_end: 1e-4,
                j: 10,
                k: 10,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Applies `section.field=value` (or bare `field=value`) overrides;
    /// every key must match some field.
    pub fn with_overrides(&self, kv: &KeyValues) -> Result<Self, ConfigError> {
        let mut used = BTreeSet::new();
        let mut take = |u: BTreeSet<String>| used.extend(u);
        let (synth, u) = kv.apply("synth", &self.synth)?;
        take(u);
        let (ingest, u) = kv.apply("ingest", &self.ingest)?;
        take(u);
        let (encoder, u) = kv.apply("encoder", &self.encoder)?;
        take(u);
        let (model, u) = kv.apply("model", &self.model)?;
        take(u);
        let (train, u) = kv.apply("train", &self.train)?;
        take(u);
        let (eval, u) = kv.apply("eval", &self.eval)?;
        take(u);
        kv.check_all_used(&used)?;
        Ok(Self {
            synth,
            ingest,
            encoder,
            model,
            train,
            eval,
        })
    }

    pub fn render(&self) -> String {
        use crate::config_file::render;
        [
            render("synth", &self.synth),
            render("ingest", &self.ingest),
            render("encoder", &self.encoder),
            render("model", &self.model),
            render("train", &self.train),
            render("eval", &self.eval),
        ]
        .concat()
    }
}

/// Fresh weights: the head from one derived seed, the patch encoder (when
/// used) from another stream.
pub fn init_network(seed: u64, encoder: &EncoderConfig, model: &RoVFConfig) -> Result<Network, Error> {
    encoder.validate()?;
    if encoder.d_model != model.d_model {
        return Err(Error::Config(format!(
            "encoder width {} differs from head width {}",
            encoder.d_model, model.d_model
        )));
    }
    let model = RoVFModel::init(model.clone(), derive(seed, "init-model", &[]))?;
    let encoder = match encoder.kind {
        EncoderKind::ToyPatch => {
            let mut rng = stream(seed, "init-encoder", &[]);
            Some(ToyPatchEncoder::init(encoder.clone(), &mut rng)?)
        }
        EncoderKind::Precomputed => None,
    };
    Ok(Network { model, encoder })
}

/// Crops every clip of the manifest and cuts the crops into patches.
pub fn pixel_inputs(
    manifest: &ClipManifest,
    source: &dyn FrameSource,
    encoder: &ToyPatchEncoder,
) -> Result<ClipInputs, Error> {
    let size = encoder.config().resize_to;
    if manifest.config.resize_to as usize != size {
        return Err(Error::Config(format!(
            "manifest crops are {} px but the encoder expects {size} px",
            manifest.config.resize_to
        )));
    }
    let pixels = crop_all(&manifest.clips, source, size)?;
    Ok(ClipInputs::from_pixels(encoder, &manifest.clips, &pixels)?)
}

/// Inputs for a network: patches for the patch encoder, or the stored
/// tokens themselves.
pub fn network_inputs(
    network: &Network,
    manifest: &ClipManifest,
    source: Option<&dyn FrameSource>,
    tokens: Option<EmbeddingStore>,
) -> Result<ClipInputs, Error> {
    match (&network.encoder, tokens) {
        (Some(enc), _) => {
            let source = source.ok_or_else(|| Error::Config("the patch encoder needs frames".into()))?;
            pixel_inputs(manifest, source, enc)
        }
        (None, Some(store)) => Ok(ClipInputs::Tokens(store)),
        (None, None) => Err(Error::Config("a precomputed encoder needs a token file".into())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedLevel {
    /// One vector per clip.
    Video,
    /// Encoder tokens of every frame.
    Tokens,
}

/// Rounds through `f32`, the precision of embedding files.
pub fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x as f32)).collect()
}

pub fn embed_clips(
    network: &Network,
    inputs: &ClipInputs,
    clip_ids: &[u64],
    level: EmbedLevel,
) -> Result<EmbeddingStore, Error> {
    match level {
        EmbedLevel::Video => {
            let vectors = network.embed_many(inputs, clip_ids)?;
            let mut store = EmbeddingStore::new(network.model.config().out_dim);
            for (&c, v) in clip_ids.iter().zip(&vectors) {
                store.insert_vector(c, v)?;
            }
            Ok(store)
        }
        EmbedLevel::Tokens => {
            let mut store = EmbeddingStore::new(network.model.config().d_model);
            for &c in clip_ids {
                let frames: Vec<_> = network
                    .frame_tokens(inputs, c)?
                    .into_iter()
                    .map(|f| f.into_tokens())
                    .collect();
                store.insert(c, &frames)?;
            }
            Ok(store)
        }
    }
}

/// Clip embeddings read from a file: single-vector entries are used as is,
/// multi-token entries are collapsed with the averaging baseline.
pub fn store_embedding(store: &EmbeddingStore, clip_id: u64) -> Result<Vec<f64>, String> {
    let clip = store
        .clip(clip_id)
        .ok_or_else(|| format!("clip {clip_id} not in embedding file"))?;
    if clip.n_frames == 1 && clip.n_tokens == 1 {
        store.vector(clip_id).map_err(|e| e.to_string())
    } else {
        let frames = store.frames(clip_id).map_err(|e| e.to_string())?;
        average_baseline(&frames).map_err(|e| e.to_string())
    }
}

/// Evaluates a network in process, with embeddings rounded exactly as an
/// embedding file would store them.
pub fn evaluate_network(network: &Network, inputs: &ClipInputs, sets: &EvalSets) -> Result<EvalReport, Error> {
    let ids = sets.clip_ids();
    let vectors = network.embed_many(inputs, &ids)?;
    Ok(evaluate(sets, |c| {
        Ok(round_f32(&vectors[ids.binary_search(&c).expect("collected")]))
    })?)
}

/// I.i.d. standard normal vectors, one stream per clip.
pub fn random_embedding(seed: u64, clip_id: u64, dim: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = stream(seed, "random-embedding", &[clip_id]);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Files written by [`run_desk`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub embeddings: PathBuf,
    pub eval_sets: PathBuf,
    pub report: PathBuf,
    pub ranks: PathBuf,
    pub steps: PathBuf,
    pub triplets: PathBuf,
}

impl RunArtifacts {
    pub fn deterministic_files(&self) -> [&Path; 9] {
        [
            &self.train_manifest,
            &self.test_manifest,
            &self.checkpoint,
            &self.embeddings,
            &self.eval_sets,
            &self.report,
            &self.ranks,
            &self.steps,
            &self.triplets,
        ]
    }
}

pub struct DeskRun {
    pub outcome: TrainOutcome,
    pub report: EvalReport,
    pub artifacts: RunArtifacts,
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Synthesizes data, trains on the training videos, and evaluates the
/// final network on sets drawn from the held-out videos.
pub fn run_desk(
    cfg: &PipelineConfig,
    seed: u64,
    out: &Path,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<DeskRun, Error> {
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let data = synth_dataset(&cfg.synth, seed);
    let train_manifest = ingest(&data.train.tracks(), &cfg.ingest)?;
    let test_manifest = ingest(&data.test.tracks(), &cfg.ingest)?;
    let network = init_network(seed, &cfg.encoder, &cfg.model)?;
    let train_inputs = network_inputs(&network, &train_manifest, Some(&data.train), None)?;
    let test_inputs = network_inputs(&network, &test_manifest, Some(&data.test), None)?;
    let train_cfg = TrainConfig {
        seed: derive(seed, "train", &[]),
        ..cfg.train.clone()
    };
    let index = ClipIndex::new(&train_manifest);
    let outcome = train_with(&index, &train_inputs, network, &train_cfg, seed, on_epoch)?;

    let test_index = ClipIndex::new(&test_manifest);
    let sets = generate_eval_sets(&test_index, cfg.eval.n_sets, derive(seed, "eval", &[]), cfg.eval.filter())?;
    let ids: Vec<u64> = test_manifest.clips.iter().map(|c| c.clip_id).collect();
    let store = embed_clips(&outcome.network, &test_inputs, &ids, EmbedLevel::Video)?;
    let report = evaluate(&sets, |c| store_embedding(&store, c))?;

    let p = |name: &str| out.join(name);
    let artifacts = RunArtifacts {
        train_manifest: p("train_manifest.json"),
        test_manifest: p("test_manifest.json"),
        checkpoint: p("model.ckpt"),
        embeddings: p("test_embeddings.bin"),
        eval_sets: p("eval_sets.json"),
        report: p("report.json"),
        ranks: p("ranks.csv"),
        steps: p("train_stats.csv"),
        triplets: p("triplets.csv"),
    };
    write(&artifacts.train_manifest, train_manifest.to_json().as_bytes())?;
    write(&artifacts.test_manifest, test_manifest.to_json().as_bytes())?;
    let final_ck = crate::model::Checkpoint {
        model: outcome.network.model.clone(),
        encoder: outcome.network.encoder.clone(),
        lineage: crate::model::SeedLineage {
            init_seed: seed,
            train_seed: train_cfg.seed,
            epoch: train_cfg.epochs,
            step: outcome.stats.steps.len(),
        },
    };
    write(&artifacts.checkpoint, &final_ck.to_bytes()?)?;
    write(&artifacts.embeddings, &store.to_bytes())?;
    write(&artifacts.eval_sets, sets.to_json().as_bytes())?;
    write(&artifacts.report, report.to_json().as_bytes())?;
    let mut ranks = Vec::new();
    report.write_ranks_csv(&mut ranks)?;
    write(&artifacts.ranks, &ranks)?;
    let mut steps = Vec::new();
    outcome.stats.write_steps_csv(&mut steps)?;
    write(&artifacts.steps, &steps)?;
    let mut triplets = Vec::new();
    crate::miner::write_triplet_log(&mut triplets, &outcome.stats.triplets)?;
    write(&artifacts.triplets, &triplets)?;
    Ok(DeskRun {
        outcome,
        report,
        artifacts,
    })
}
