//! Label-free video re-identification.
//!
//! Annotated tracks are cut into short clips; clips of the same track are
//! treated as the same individual and clips of tracks that share a frame as
//! different individuals. A recurrent latent-array head folds per-frame
//! tokens into one embedding per clip and is trained with hard-mined
//! triplets; query/gallery top-k accuracy measures the result.

pub mod config_file;
pub mod dataset;
pub mod distance;
pub mod encoders;
pub mod eval;
pub mod ingest;
pub mod miner;
pub mod model;
pub mod network;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod tape;
pub mod trainer;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Encoder(#[from] encoders::EncoderError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Checkpoint(#[from] model::CheckpointError),
    #[error(transparent)]
    Network(#[from] network::NetworkError),
    #[error(transparent)]
    Miner(#[from] miner::MinerError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    ConfigFile(#[from] config_file::ConfigError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}
