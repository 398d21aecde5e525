use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rovf_core::config_file::KeyValues;
use rovf_core::dataset::ClipIndex;
use rovf_core::encoders::{average_baseline, first_frame_baseline, EmbeddingStore};
use rovf_core::eval::{evaluate, generate_eval_sets, EvalReport, EvalSets};
use rovf_core::ingest::{ingest, parse_tracks, write_tracks, ClipManifest, DirFrameSource, FrameSource};
use rovf_core::model::{Checkpoint, SeedLineage};
use rovf_core::network::{ClipInputs, Network};
use rovf_core::pipeline::{
    embed_clips, evaluate_network, init_network, network_inputs, random_embedding, store_embedding, synth_dataset,
    EmbedLevel, PipelineConfig,
};
use rovf_core::report::{line_plot_svg, read_epoch_stats, read_step_stats, write_metrics_csv, MetricsRow};
use rovf_core::seed::derive;
use rovf_core::trainer::{train_with, TrainConfig};

mod run;

use run::Recorder;

/// Label-free video re-identification from tracked clips.
#[derive(Parser, Debug)]
#[command(name = "rovf", version)]
struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat `key=value` file overriding the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic population: train/ and test/ with tracks.csv and frames/.
    Synth(SynthArgs),
    /// Cut tracks into clips and write a clip manifest.
    Ingest(IngestArgs),
    /// Train the encoder and head with mined triplets.
    Train(TrainArgs),
    /// Write clip embeddings (or frame tokens) for a manifest.
    Embed(EmbedArgs),
    /// Generate query sets and score an embedder on them.
    Eval(EvalArgs),
    /// Summarize training and evaluation as a CSV table and SVG plots.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Track annotations (`video_id,frame,track_id,x,y,w,h,occluded` with a header).
    #[arg(long)]
    tracks: PathBuf,
    /// Frame directory the tracks refer to; checked and recorded.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Minimum largest box side in pixels for a clip window.
    #[arg(long)]
    min_box: Option<f64>,
    /// Manifest path.
    #[arg(long)]
    out: PathBuf,
}

/// Where frame content comes from.
#[derive(Args, Debug)]
struct FrameInput {
    /// Frame directory laid out as `<video_id>/<frame:06>.png`.
    #[arg(long, conflicts_with = "tokens")]
    frames: Option<PathBuf>,
    /// Precomputed per-frame tokens for every clip of the manifest.
    #[arg(long)]
    tokens: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training clip manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    input: FrameInput,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Level {
    Video,
    Tokens,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    input: FrameInput,
    /// `video` writes one vector per clip, `tokens` the encoder output per frame.
    #[arg(long, value_enum, default_value_t = Level::Video)]
    level: Level,
    /// Embedding file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Embedder {
    /// Independent standard normal vectors per clip.
    Random,
    /// Mean over frames and tokens of a token file.
    Baseline,
    /// Mean over the tokens of the first frame of each clip.
    FirstFrame,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Manifest of the held-out clips.
    #[arg(long)]
    manifest: PathBuf,
    /// Reuse query sets instead of generating them.
    #[arg(long)]
    sets: Option<PathBuf>,
    /// Number of sets to generate.
    #[arg(long)]
    n_sets: Option<usize>,
    /// Clip embeddings written by `embed` (video or token level).
    #[arg(long, conflicts_with_all = ["checkpoint", "embedder"])]
    embeddings: Option<PathBuf>,
    /// Embed with a trained checkpoint in process.
    #[arg(long, conflicts_with = "embedder")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    input: FrameInput,
    /// Reference embedders; `baseline` and `first-frame` read `--tokens`.
    #[arg(long, value_enum)]
    embedder: Option<Embedder>,
    /// Width of random embeddings (defaults to the head's output width).
    #[arg(long)]
    dim: Option<usize>,
    /// Output directory: report.json, ranks.csv, eval_sets.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Per-step training log (`train_stats.csv`).
    #[arg(long)]
    stats: PathBuf,
    /// Per-epoch log with wall time (`epoch_stats.csv`).
    #[arg(long)]
    epochs: Option<PathBuf>,
    /// Evaluation report (`report.json`).
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Row label in the metrics table.
    #[arg(long, default_value = "RoVF")]
    name: String,
    /// Output directory: metrics.csv, loss.svg, lr.svg.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = PipelineConfig::desk();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let kv = KeyValues::parse(&text).with_context(|| format!("config {}", path.display()))?;
        cfg = cfg.with_overrides(&kv).with_context(|| format!("config {}", path.display()))?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(&cfg, seed, &a),
        Command::Ingest(a) => cmd_ingest(&mut cfg, seed, &a),
        Command::Train(a) => train(&cfg, seed, &a),
        Command::Embed(a) => embed(&cfg, seed, &a),
        Command::Eval(a) => eval(&cfg, seed, &a),
        Command::Report(a) => report(&cfg, seed, &a),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn load_manifest(rec: &mut Recorder, path: &Path) -> Result<ClipManifest> {
    let text = fs::read_to_string(rec.input(path)?).with_context(|| format!("reading {}", path.display()))?;
    ClipManifest::from_json(&text).with_context(|| format!("manifest {} is malformed", path.display()))
}

fn load_checkpoint(rec: &mut Recorder, path: &Path) -> Result<Network> {
    let ck = Checkpoint::load(rec.input(path)?).with_context(|| format!("checkpoint {}", path.display()))?;
    Ok(Network {
        model: ck.model,
        encoder: ck.encoder,
    })
}

fn load_store(rec: &mut Recorder, path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::read(rec.input(path)?).with_context(|| format!("embedding file {}", path.display()))
}

fn load_inputs(rec: &mut Recorder, network: &Network, manifest: &ClipManifest, input: &FrameInput) -> Result<ClipInputs> {
    let source = match &input.frames {
        Some(dir) => Some(DirFrameSource::new(rec.input(dir)?)),
        None => None,
    };
    let tokens = match &input.tokens {
        Some(path) => Some(load_store(rec, path)?),
        None => None,
    };
    let inputs = network_inputs(network, manifest, source.as_ref().map(|s| s as &dyn FrameSource), tokens)?;
    network
        .check_inputs(&inputs)
        .context("frame inputs do not fit the network")?;
    if let Some(c) = manifest.clips.iter().find(|c| !inputs.contains(c.clip_id)) {
        let what = input.tokens.as_ref().or(input.frames.as_ref()).expect("one source given");
        bail!("clip {} of the manifest is missing from {}", c.clip_id, what.display());
    }
    Ok(inputs)
}

fn synth(cfg: &PipelineConfig, seed: u64, a: &SynthArgs) -> Result<()> {
    let rec = Recorder::new("synth", cfg.render(), seed);
    let data = synth_dataset(&cfg.synth, seed);
    let mut outputs = Vec::new();
    for (name, frames) in [("train", &data.train), ("test", &data.test)] {
        let dir = a.out.join(name);
        create_dir(&dir)?;
        let tracks_path = dir.join("tracks.csv");
        let file = fs::File::create(&tracks_path).with_context(|| format!("creating {}", tracks_path.display()))?;
        write_tracks(&frames.tracks(), file)?;
        let frames_dir = dir.join("frames");
        create_dir(&frames_dir)?;
        frames
            .write_pngs(&frames_dir)
            .with_context(|| format!("writing frames to {}", frames_dir.display()))?;
        println!(
            "{name}: {} videos, {} tracks -> {}",
            frames.videos().count(),
            frames.tracks().len(),
            dir.display()
        );
        outputs.push(tracks_path);
        outputs.push(frames_dir);
    }
    rec.finish(&a.out, &outputs)?;
    Ok(())
}

fn cmd_ingest(cfg: &mut PipelineConfig, seed: u64, a: &IngestArgs) -> Result<()> {
    if let Some(m) = a.min_box {
        cfg.ingest.min_box = m;
    }
    let mut rec = Recorder::new("ingest", cfg.render(), seed);
    let tracks = parse_tracks(rec.input(&a.tracks)?).with_context(|| format!("tracks {}", a.tracks.display()))?;
    if let Some(frames) = &a.frames {
        if !frames.is_dir() {
            bail!("frame directory {} does not exist", frames.display());
        }
        rec.input(frames)?;
    }
    let manifest = ingest(&tracks, &cfg.ingest).with_context(|| format!("tracks {}", a.tracks.display()))?;
    let s = &manifest.stats;
    println!(
        "{} videos, {} tracks, {} clips, {} co-occurrence edges, {} anchor tracks",
        s.n_videos, s.n_tracks, s.n_clips, s.n_cooccurrence_edges, s.anchor_eligible_tracks
    );
    println!(
        "windows: {} considered, {} small, {} occluded, {} missing frames",
        s.windows_considered, s.windows_small, s.windows_occluded, s.windows_missing_frames
    );
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    if s.n_clips == 0 {
        eprintln!("warning: no clips survived; check min_box ({} px)", cfg.ingest.min_box);
    }
    write(&a.out, manifest.to_json())?;
    rec.finish(&a.out, std::slice::from_ref(&a.out))?;
    Ok(())
}

fn train(cfg: &PipelineConfig, seed: u64, a: &TrainArgs) -> Result<()> {
    let mut rec = Recorder::new("train", cfg.render(), seed);
    let manifest = load_manifest(&mut rec, &a.manifest)?;
    let network = init_network(seed, &cfg.encoder, &cfg.model)?;
    let inputs = load_inputs(&mut rec, &network, &manifest, &a.input)?;
    let train_cfg = TrainConfig {
        seed: derive(seed, "train", &[]),
        ..cfg.train.clone()
    };
    let index = ClipIndex::new(&manifest);
    let outcome = train_with(&index, &inputs, network, &train_cfg, seed, |e| {
        println!(
            "epoch {}: {} steps, mean loss {:.4}, {:.1} s",
            e.epoch, e.steps, e.mean_loss, e.wall_seconds
        );
    })
    .with_context(|| format!("training on {}", a.manifest.display()))?;

    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    for (epoch, ck) in &outcome.checkpoints {
        let path = a.out.join(format!("epoch_{epoch:03}.ckpt"));
        write(&path, ck.to_bytes()?)?;
        outputs.push(path);
    }
    let last = Checkpoint {
        model: outcome.network.model.clone(),
        encoder: outcome.network.encoder.clone(),
        lineage: SeedLineage {
            init_seed: seed,
            train_seed: train_cfg.seed,
            epoch: train_cfg.epochs,
            step: outcome.stats.steps.len(),
        },
    };
    let path = a.out.join("final.ckpt");
    write(&path, last.to_bytes()?)?;
    outputs.push(path);

    let mut buf = Vec::new();
    outcome.stats.write_steps_csv(&mut buf)?;
    outputs.push(a.out.join("train_stats.csv"));
    write(outputs.last().unwrap(), &buf)?;
    buf.clear();
    outcome.stats.write_epochs_csv(&mut buf)?;
    outputs.push(a.out.join("epoch_stats.csv"));
    write(outputs.last().unwrap(), &buf)?;
    buf.clear();
    rovf_core::miner::write_triplet_log(&mut buf, &outcome.stats.triplets)?;
    outputs.push(a.out.join("triplets.csv"));
    write(outputs.last().unwrap(), &buf)?;
    println!("wrote {} checkpoints and logs to {}", outcome.checkpoints.len() + 1, a.out.display());
    rec.finish(&a.out, &outputs)?;
    Ok(())
}

fn embed(cfg: &PipelineConfig, seed: u64, a: &EmbedArgs) -> Result<()> {
    let mut rec = Recorder::new("embed", cfg.render(), seed);
    let manifest = load_manifest(&mut rec, &a.manifest)?;
    let network = load_checkpoint(&mut rec, &a.checkpoint)?;
    let inputs = load_inputs(&mut rec, &network, &manifest, &a.input)?;
    let level = match a.level {
        Level::Video => EmbedLevel::Video,
        Level::Tokens => EmbedLevel::Tokens,
    };
    let ids: Vec<u64> = manifest.clips.iter().map(|c| c.clip_id).collect();
    let store = embed_clips(&network, &inputs, &ids, level)?;
    write(&a.out, store.to_bytes())?;
    println!("{} clips, width {} -> {}", store.len(), store.d_model(), a.out.display());
    rec.finish(&a.out, std::slice::from_ref(&a.out))?;
    Ok(())
}

fn eval(cfg: &PipelineConfig, seed: u64, a: &EvalArgs) -> Result<()> {
    let mut rec = Recorder::new("eval", cfg.render(), seed);
    let manifest = load_manifest(&mut rec, &a.manifest)?;
    let sets = match &a.sets {
        Some(path) => {
            let text = fs::read_to_string(rec.input(path)?)?;
            EvalSets::from_json(&text).with_context(|| format!("query sets {}", path.display()))?
        }
        None => {
            let index = ClipIndex::new(&manifest);
            let n = a.n_sets.unwrap_or(cfg.eval.n_sets);
            generate_eval_sets(&index, n, derive(seed, "eval", &[]), cfg.eval.filter())
                .with_context(|| format!("generating query sets from {}", a.manifest.display()))?
        }
    };
    if let Some(c) = sets.clip_ids().into_iter().find(|&c| !manifest.clips.iter().any(|s| s.clip_id == c)) {
        bail!("query sets reference clip {c} absent from {}", a.manifest.display());
    }

    let report: EvalReport = if let Some(path) = &a.embeddings {
        let store = load_store(&mut rec, path)?;
        evaluate(&sets, |c| store_embedding(&store, c)).with_context(|| format!("embeddings {}", path.display()))?
    } else if let Some(path) = &a.checkpoint {
        let network = load_checkpoint(&mut rec, path)?;
        let inputs = load_inputs(&mut rec, &network, &manifest, &a.input)?;
        evaluate_network(&network, &inputs, &sets)?
    } else {
        match a.embedder {
            Some(Embedder::Random) => {
                let dim = a.dim.unwrap_or(cfg.model.out_dim);
                evaluate(&sets, |c| Ok(random_embedding(seed, c, dim)))?
            }
            Some(kind @ (Embedder::Baseline | Embedder::FirstFrame)) => {
                let Some(path) = &a.input.tokens else {
                    bail!("the {kind:?} embedder needs --tokens");
                };
                let store = load_store(&mut rec, path)?;
                evaluate(&sets, |c| {
                    let frames = store.frames(c).map_err(|e| e.to_string())?;
                    match kind {
                        Embedder::FirstFrame => first_frame_baseline(&frames),
                        _ => average_baseline(&frames),
                    }
                    .map_err(|e| e.to_string())
                })
                .with_context(|| format!("tokens {}", path.display()))?
            }
            None => bail!("give one of --embeddings, --checkpoint or --embedder"),
        }
    };

    create_dir(&a.out)?;
    let report_path = a.out.join("report.json");
    write(&report_path, report.to_json())?;
    let mut ranks = Vec::new();
    report.write_ranks_csv(&mut ranks)?;
    let ranks_path = a.out.join("ranks.csv");
    write(&ranks_path, ranks)?;
    let sets_path = a.out.join("eval_sets.json");
    write(&sets_path, sets.to_json())?;
    println!(
        "{} queries over {} sets: top-1 {:.1}% [{:.1}, {:.1}], top-3 {:.1}% [{:.1}, {:.1}]",
        report.n_queries,
        report.n_sets,
        100.0 * report.top1,
        100.0 * report.top1_ci95[0],
        100.0 * report.top1_ci95[1],
        100.0 * report.top3,
        100.0 * report.top3_ci95[0],
        100.0 * report.top3_ci95[1],
    );
    rec.finish(&a.out, &[report_path, ranks_path, sets_path])?;
    Ok(())
}

fn report(cfg: &PipelineConfig, seed: u64, a: &ReportArgs) -> Result<()> {
    let mut rec = Recorder::new("report", cfg.render(), seed);
    let name = a.stats.display().to_string();
    let steps = read_step_stats(fs::File::open(rec.input(&a.stats)?)?, &name)?;
    let epochs = match &a.epochs {
        Some(p) => read_epoch_stats(fs::File::open(rec.input(p)?)?, &p.display().to_string())?,
        None => Vec::new(),
    };
    create_dir(&a.out)?;
    let mut outputs = Vec::new();

    let loss: Vec<(f64, f64)> = steps.iter().map(|s| (s.step as f64, s.loss)).collect();
    let lr: Vec<(f64, f64)> = steps.iter().map(|s| (s.step as f64, s.lr)).collect();
    for (file, title, y, points) in [
        ("loss.svg", "Training loss", "mean triplet loss", &loss),
        ("lr.svg", "Learning rate", "lr", &lr),
    ] {
        let path = a.out.join(file);
        write(&path, line_plot_svg(title, "step", y, points)?)?;
        outputs.push(path);
    }

    if let Some(p) = &a.eval {
        let text = fs::read_to_string(rec.input(p)?)?;
        let ev = EvalReport::from_json(&text).with_context(|| format!("evaluation report {}", p.display()))?;
        let epoch_time_s = if epochs.is_empty() {
            f64::NAN
        } else {
            epochs.iter().map(|e| e.wall_seconds).sum::<f64>() / epochs.len() as f64
        };
        let row = MetricsRow {
            model: a.name.clone(),
            epochs: steps.iter().map(|s| s.epoch).max().unwrap_or(0),
            top1: 100.0 * ev.top1,
            top3: 100.0 * ev.top3,
            epoch_time_s,
        };
        let path = a.out.join("metrics.csv");
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, std::slice::from_ref(&row))?;
        write(&path, &buf)?;
        print!("{}", String::from_utf8_lossy(&buf));
        outputs.push(path);
    }
    rec.finish(&a.out, &outputs)?;
    Ok(())
}
