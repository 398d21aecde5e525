use rovf_core::dataset::ClipIndex;
use rovf_core::encoders::{EncoderConfig, EncoderKind};
use rovf_core::ingest::{ingest, ClipManifest, IngestConfig};
use rovf_core::model::{Checkpoint, RoVFConfig};
use rovf_core::network::{ClipInputs, Network};
use rovf_core::pipeline::{init_network, network_inputs, synth_dataset, SynthSpec};
use rovf_core::trainer::{lr_at, train, OptimizerKind, TrainConfig, TrainError};
use rovf_core::miner::MinerError;
use sha2::{Digest, Sha256};

fn encoder_cfg() -> EncoderConfig {
    EncoderConfig {
        kind: EncoderKind::ToyPatch,
        patch_size: 8,
        d_model: 8,
        trainable: true,
        resize_to: 16,
    }
}

fn model_cfg() -> RoVFConfig {
    RoVFConfig {
        d_model: 8,
        n_latents: 2,
        n_layers: 1,
        n_heads: 2,
        dropout: 0.1,
        d_ff: 16,
        out_dim: 4,
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_triplets: 4,
        j: 4,
        k: 4,
        checkpoint_epochs: vec![1, 2],
        seed: 5,
        ..Default::default()
    }
}

struct Fixture {
    manifest: ClipManifest,
    inputs: ClipInputs,
    network: Network,
}

fn fixture() -> Fixture {
    let spec = SynthSpec {
        train_videos: 1,
        test_videos: 0,
        duration_s: 90,
        ..Default::default()
    };
    let data = synth_dataset(&spec, 3);
    let manifest = ingest(&data.train.tracks(), &IngestConfig { resize_to: 16, ..Default::default() }).unwrap();
    let network = init_network(9, &encoder_cfg(), &model_cfg()).unwrap();
    let inputs = network_inputs(&network, &manifest, Some(&data.train), None).unwrap();
    Fixture {
        manifest,
        inputs,
        network,
    }
}

fn checksum(net: &Network) -> Vec<u8> {
    let ck = Checkpoint {
        model: net.model.clone(),
        encoder: net.encoder.clone(),
        lineage: Default::default(),
    };
    Sha256::digest(ck.to_bytes().unwrap()).to_vec()
}

#[test]
fn frozen_encoder_is_bit_identical() {
    let f = fixture();
    let cfg = TrainConfig {
        freeze_encoder: true,
        ..train_cfg()
    };
    let out = train(&ClipIndex::new(&f.manifest), &f.inputs, f.network.clone(), &cfg, 9).unwrap();
    assert!(!out.encoder_trained);
    assert_eq!(out.network.encoder, f.network.encoder);
    assert_ne!(out.network.model, f.network.model);

    let out = train(&ClipIndex::new(&f.manifest), &f.inputs, f.network.clone(), &train_cfg(), 9).unwrap();
    assert!(out.encoder_trained);
    assert_ne!(out.network.encoder, f.network.encoder);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let f = fixture();
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let cfg = TrainConfig {
            lr_start: 0.0,
            lr_peak: 0.0,
            lr_end: 0.0,
            epochs: 1,
            checkpoint_epochs: vec![],
            optimizer,
            ..train_cfg()
        };
        let out = train(&ClipIndex::new(&f.manifest), &f.inputs, f.network.clone(), &cfg, 9).unwrap();
        assert!(!out.stats.steps.is_empty());
        assert_eq!(out.network, f.network, "{optimizer:?}");
    }
}

#[test]
fn runs_reproduce_and_log_the_schedule() {
    let f = fixture();
    let index = ClipIndex::new(&f.manifest);
    let cfg = train_cfg();
    let a = train(&index, &f.inputs, f.network.clone(), &cfg, 9).unwrap();
    let b = train(&index, &f.inputs, f.network.clone(), &cfg, 9).unwrap();
    assert_eq!(checksum(&a.network), checksum(&b.network));
    assert_eq!(a.stats.steps, b.stats.steps);
    assert_eq!(a.stats.triplets, b.stats.triplets);

    let other = train(&index, &f.inputs, f.network.clone(), &TrainConfig { seed: 6, ..cfg.clone() }, 9).unwrap();
    assert_ne!(checksum(&a.network), checksum(&other.network));

    // one step per batch of anchors, lr from the schedule, sane stats
    let anchors = f.manifest.stats.anchor_eligible_tracks;
    let spe = anchors.div_ceil(cfg.batch_triplets);
    assert_eq!(a.stats.steps.len(), spe * cfg.epochs);
    for s in &a.stats.steps {
        assert_eq!(s.lr, lr_at(s.step, spe, spe * cfg.epochs, &cfg).unwrap());
        assert!(s.loss >= 0.0 && (0.0..=1.0).contains(&s.active_frac));
    }
    assert_eq!(a.stats.epochs.len(), 2);
    assert_eq!(a.stats.triplets.len(), anchors * cfg.epochs);
    let epochs: Vec<usize> = a.checkpoints.iter().map(|(e, _)| *e).collect();
    assert_eq!(epochs, vec![1, 2]);
}

#[test]
fn checkpoints_round_trip_and_reload_the_network() {
    let f = fixture();
    let out = train(&ClipIndex::new(&f.manifest), &f.inputs, f.network.clone(), &train_cfg(), 9).unwrap();
    let (_, last) = out.checkpoints.last().unwrap();
    let bytes = last.to_bytes().unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    assert_eq!(loaded.lineage.epoch, 2);
    let net = Network {
        model: loaded.model,
        encoder: loaded.encoder,
    };
    let ids: Vec<u64> = f.manifest.clips.iter().take(5).map(|c| c.clip_id).collect();
    let before = out.network.embed_many(&f.inputs, &ids).unwrap();
    let after = net.embed_many(&f.inputs, &ids).unwrap();
    // weights are stored as f32
    for (x, y) in before.iter().flatten().zip(after.iter().flatten()) {
        assert!((x - y).abs() <= 1e-4 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

#[test]
fn ineligible_dataset_is_rejected() {
    let spec = SynthSpec {
        n_identities: 1,
        train_videos: 1,
        test_videos: 0,
        duration_s: 60,
        ..Default::default()
    };
    let data = synth_dataset(&spec, 3);
    let manifest = ingest(&data.train.tracks(), &IngestConfig { resize_to: 16, ..Default::default() }).unwrap();
    let network = init_network(9, &encoder_cfg(), &model_cfg()).unwrap();
    let inputs = network_inputs(&network, &manifest, Some(&data.train), None).unwrap();
    let err = train(&ClipIndex::new(&manifest), &inputs, network, &train_cfg(), 9).unwrap_err();
    assert!(matches!(err, TrainError::Miner(MinerError::Ineligible(_))), "{err}");
    assert!(err.to_string().contains("ineligible dataset"), "{err}");
}
