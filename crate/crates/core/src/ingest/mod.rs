//! Track ingestion and clip generation.
//!
//! Annotated bounding-box tracks are grouped per video, turned into a
//! co-occurrence graph (two tracks co-occur when they share a frame index),
//! and cut into fixed-length staggered clips that pass the occlusion and
//! minimum-size filters.

mod clips;
mod cooccur;
mod frames;
mod parse;
pub mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use clips::{generate_clips, generate_clips_with_stats, validate_clip, WindowStats};
pub use cooccur::{build_cooccurrence, CoOccurrenceGraph};
pub use frames::{
    crop_all, crop_frame, crop_frames, crop_square, ClipPixels, DirFrameSource, Frame, FrameSource,
    SquareCrop,
};
pub use parse::{parse_tracks, read_tracks, write_tracks};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("row {row}: {message}")]
    Row { row: u64, message: String },
    #[error("track {track_id} in video {video_id}: {message}")]
    InvalidTrack {
        video_id: u32,
        track_id: u32,
        message: String,
    },
    #[error("invalid ingest config: {0}")]
    InvalidConfig(String),
    #[error("clip {clip_id}: frame {frame_index} of video {video_id} unavailable: {message}")]
    MissingFrame {
        clip_id: u64,
        video_id: u32,
        frame_index: u64,
        message: String,
    },
    #[error("invalid clip {clip_id}: {message}")]
    InvalidClip { clip_id: u64, message: String },
}

/// Identifies a track; annotator track ids are only unique within a video.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct TrackKey {
    pub video_id: u32,
    pub track_id: u32,
}

impl fmt::Display for TrackKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.video_id, self.track_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub frame_index: u64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub occluded: bool,
}

impl BoundingBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn max_side(&self) -> f64 {
        self.w.max(self.h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u32,
    pub video_id: u32,
    pub boxes: Vec<BoundingBox>,
}

impl Track {
    pub fn key(&self) -> TrackKey {
        TrackKey {
            video_id: self.video_id,
            track_id: self.track_id,
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let err = |message: String| IngestError::InvalidTrack {
            video_id: self.video_id,
            track_id: self.track_id,
            message,
        };
        if self.boxes.is_empty() {
            return Err(err("track has no boxes".into()));
        }
        for pair in self.boxes.windows(2) {
            if pair[1].frame_index <= pair[0].frame_index {
                return Err(err(format!(
                    "frame index {} does not increase after {}",
                    pair[1].frame_index, pair[0].frame_index
                )));
            }
        }
        if let Some(b) = self
            .boxes
            .iter()
            .find(|b| !(b.w > 0.0 && b.h > 0.0) || !b.x.is_finite() || !b.y.is_finite())
        {
            return Err(err(format!(
                "invalid box geometry at frame {}",
                b.frame_index
            )));
        }
        Ok(())
    }
}

/// Exact non-negative rational, written as `num/den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rational {
    pub num: u64,
    pub den: u64,
}

impl Rational {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "zero denominator");
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Rational {
    type Err = String;

    /// Accepts `a/b`, integers and plain decimals (`2.5`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || format!("not a non-negative rational: {s:?}");
        if let Some((n, d)) = s.split_once('/') {
            let num = n.trim().parse().map_err(|_| bad())?;
            let den: u64 = d.trim().parse().map_err(|_| bad())?;
            if den == 0 {
                return Err(bad());
            }
            return Ok(Rational::new(num, den));
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.is_empty() || frac.len() > 9 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let den = 10u64.pow(frac.len() as u32);
            let int: u64 = if int.is_empty() {
                0
            } else {
                int.parse().map_err(|_| bad())?
            };
            let frac: u64 = frac.parse().map_err(|_| bad())?;
            return Ok(Rational::new(int * den + frac, den));
        }
        Ok(Rational::new(s.parse().map_err(|_| bad())?, 1))
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub clip_seconds: u32,
    /// Sampling rate of clips.
    pub fps: u32,
    pub stagger_seconds: Rational,
    /// Windows whose largest box side does not exceed this are dropped.
    pub min_box: f64,
    pub resize_to: u32,
    /// Frame rate of the annotated source video.
    pub source_fps: u32,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            clip_seconds: 10,
            fps: 1,
            stagger_seconds: Rational::new(10, 3),
            min_box: 70.0,
            resize_to: 224,
            source_fps: 1,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidConfig(m.to_string()));
        if self.clip_seconds == 0 || self.fps == 0 || self.resize_to == 0 || self.source_fps == 0 {
            return bad("clip_seconds, fps, resize_to and source_fps must be positive");
        }
        if self.stagger_seconds.num == 0 {
            return bad("stagger_seconds must be positive");
        }
        if self.min_box.is_nan() || self.min_box <= 0.0 {
            return bad("min_box must be positive");
        }
        let stagger = self.stagger_seconds;
        if stagger.num > u64::from(self.clip_seconds) * stagger.den {
            return bad("stagger_seconds must not exceed clip_seconds");
        }
        Ok(())
    }

    pub fn frames_per_clip(&self) -> usize {
        (self.clip_seconds * self.fps) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub clip_id: u64,
    pub track_id: u32,
    pub video_id: u32,
    pub start_frame: u64,
    pub frame_indices: Vec<u64>,
    pub crop_side: f64,
    pub crop_centers: Vec<(f64, f64)>,
}

impl ClipSpec {
    pub fn track_key(&self) -> TrackKey {
        TrackKey {
            video_id: self.video_id,
            track_id: self.track_id,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub n_videos: usize,
    pub n_tracks: usize,
    pub n_clips: usize,
    pub n_cooccurrence_edges: usize,
    pub windows_considered: usize,
    pub windows_missing_frames: usize,
    pub windows_occluded: usize,
    pub windows_small: usize,
    pub tracks_without_clips: Vec<TrackKey>,
    /// Tracks with enough clips to anchor a triplet and at least one
    /// co-occurring clip to serve as negative.
    pub anchor_eligible_tracks: usize,
    pub mining_eligible: bool,
    pub warnings: Vec<String>,
}

/// The derived clip set with provenance and co-occurrence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub config: IngestConfig,
    pub clips: Vec<ClipSpec>,
    /// `[video_id, track_a, track_b]` with `track_a < track_b`.
    pub cooccurrence: Vec<[u32; 3]>,
    pub stats: IngestStats,
}

impl ClipManifest {
    pub fn graph(&self) -> CoOccurrenceGraph {
        CoOccurrenceGraph::from_triples(&self.cooccurrence)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Minimum clips for a track to serve as anchor/positive source.
pub const MIN_ANCHOR_CLIPS: usize = 3;

/// Builds the co-occurrence graph and clips, and fills in the stats.
pub fn ingest(tracks: &[Track], cfg: &IngestConfig) -> Result<ClipManifest, IngestError> {
    cfg.validate()?;
    for t in tracks {
        t.validate()?;
    }
    let graph = build_cooccurrence(tracks);
    let (clips, window_stats) = generate_clips_with_stats(tracks, cfg)?;
    let mut stats = IngestStats {
        n_videos: tracks
            .iter()
            .map(|t| t.video_id)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        n_tracks: tracks.len(),
        n_clips: clips.len(),
        n_cooccurrence_edges: graph.len(),
        windows_considered: window_stats.considered,
        windows_missing_frames: window_stats.missing_frames,
        windows_occluded: window_stats.occluded,
        windows_small: window_stats.small,
        tracks_without_clips: window_stats.tracks_without_clips,
        ..Default::default()
    };
    let manifest_clips = clips;
    let mut manifest = ClipManifest {
        config: cfg.clone(),
        clips: manifest_clips,
        cooccurrence: graph.triples(),
        stats: IngestStats::default(),
    };
    let index = crate::dataset::ClipIndex::new(&manifest);
    stats.anchor_eligible_tracks = index.anchor_tracks(MIN_ANCHOR_CLIPS).len();
    stats.mining_eligible = stats.anchor_eligible_tracks > 0;
    if stats.n_clips == 0 {
        stats
            .warnings
            .push("no clips passed the window filters".to_string());
    }
    if !stats.mining_eligible {
        stats.warnings.push(format!(
            "mining ineligible: no track has {MIN_ANCHOR_CLIPS}+ clips and co-occurring negative clips"
        ));
    }
    manifest.stats = stats;
    Ok(manifest)
}
