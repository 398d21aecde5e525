//! Staggered fixed-length windows over tracks.
//!
//! All window arithmetic is done in integers: offsets are multiples of the
//! rational stagger converted to source frames, and sample times are rounded
//! to the nearest source frame (halves round up). A window starting at
//! offset `o` (seconds from the track's first frame) is considered only when
//! `o + clip_seconds` does not exceed the track duration, where a track
//! spanning frames `f0..=f1` lasts `(f1 - f0 + 1) / source_fps` seconds.

use std::collections::HashMap;

use super::{BoundingBox, ClipSpec, IngestConfig, IngestError, Track, TrackKey};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowStats {
    pub considered: usize,
    pub missing_frames: usize,
    pub occluded: usize,
    pub small: usize,
    pub tracks_without_clips: Vec<TrackKey>,
}

fn round_div(num: u64, den: u64) -> u64 {
    (2 * num + den) / (2 * den)
}

/// Source frame offsets (relative to the track start) sampled by window `m`.
fn window_offsets(cfg: &IngestConfig, m: u64) -> Vec<u64> {
    let sf = u64::from(cfg.source_fps);
    let fps = u64::from(cfg.fps);
    let (sn, sd) = (cfg.stagger_seconds.num, cfg.stagger_seconds.den);
    (0..cfg.frames_per_clip() as u64)
        .map(|i| round_div(m * sn * sf * fps + i * sf * sd, sd * fps))
        .collect()
}

/// Whether window `m` fits inside a track lasting `span` source frames.
fn window_fits(cfg: &IngestConfig, m: u64, span: u64) -> bool {
    let sf = u64::from(cfg.source_fps);
    let (sn, sd) = (cfg.stagger_seconds.num, cfg.stagger_seconds.den);
    m * sn * sf + u64::from(cfg.clip_seconds) * sf * sd <= span * sd
}

pub fn generate_clips(tracks: &[Track], cfg: &IngestConfig) -> Result<Vec<ClipSpec>, IngestError> {
    generate_clips_with_stats(tracks, cfg).map(|(clips, _)| clips)
}

/// Cuts every track into windows and keeps those whose frames all exist,
/// none occluded, and whose largest box side exceeds `min_box`.
///
/// Clip ids are assigned sequentially in track order.
pub fn generate_clips_with_stats(
    tracks: &[Track],
    cfg: &IngestConfig,
) -> Result<(Vec<ClipSpec>, WindowStats), IngestError> {
    cfg.validate()?;
    let mut ordered: Vec<&Track> = tracks.iter().collect();
    ordered.sort_by_key(|t| t.key());
    let mut clips = Vec::new();
    let mut stats = WindowStats::default();
    for track in ordered {
        track.validate()?;
        let first = track.boxes[0].frame_index;
        let span = track.boxes[track.boxes.len() - 1].frame_index - first + 1;
        let by_frame: HashMap<u64, &BoundingBox> =
            track.boxes.iter().map(|b| (b.frame_index, b)).collect();
        let before = clips.len();
        let mut m = 0;
        while window_fits(cfg, m, span) {
            stats.considered += 1;
            let frames: Vec<u64> = window_offsets(cfg, m).iter().map(|o| first + o).collect();
            m += 1;
            let Some(boxes) = frames
                .iter()
                .map(|f| by_frame.get(f).copied())
                .collect::<Option<Vec<_>>>()
            else {
                stats.missing_frames += 1;
                continue;
            };
            if boxes.iter().any(|b| b.occluded) {
                stats.occluded += 1;
                continue;
            }
            let crop_side = boxes.iter().map(|b| b.max_side()).fold(0.0, f64::max);
            if crop_side <= cfg.min_box {
                stats.small += 1;
                continue;
            }
            clips.push(ClipSpec {
                clip_id: clips.len() as u64,
                track_id: track.track_id,
                video_id: track.video_id,
                start_frame: frames[0],
                crop_centers: boxes.iter().map(|b| b.center()).collect(),
                frame_indices: frames,
                crop_side,
            });
        }
        if clips.len() == before {
            stats.tracks_without_clips.push(track.key());
        }
    }
    Ok((clips, stats))
}

/// Re-checks a clip against its source track.
pub fn validate_clip(clip: &ClipSpec, track: &Track, cfg: &IngestConfig) -> Result<(), IngestError> {
    let bad = |message: String| {
        Err(IngestError::InvalidClip {
            clip_id: clip.clip_id,
            message,
        })
    };
    if clip.track_key() != track.key() {
        return bad(format!("belongs to {} not {}", clip.track_key(), track.key()));
    }
    if clip.frame_indices.len() != cfg.frames_per_clip() {
        return bad(format!(
            "{} frames, expected {}",
            clip.frame_indices.len(),
            cfg.frames_per_clip()
        ));
    }
    if clip.crop_centers.len() != clip.frame_indices.len() {
        return bad("crop center count differs from frame count".into());
    }
    if clip.frame_indices.first() != Some(&clip.start_frame) {
        return bad("start_frame is not the first sampled frame".into());
    }
    let mut side = 0.0f64;
    for (f, &center) in clip.frame_indices.iter().zip(&clip.crop_centers) {
        let Ok(pos) = track.boxes.binary_search_by_key(f, |b| b.frame_index) else {
            return bad(format!("frame {f} not in track"));
        };
        let b = &track.boxes[pos];
        if b.occluded {
            return bad(format!("frame {f} is occluded"));
        }
        if b.center() != center {
            return bad(format!("crop center at frame {f} is off the box center"));
        }
        side = side.max(b.max_side());
    }
    if side != clip.crop_side {
        return bad(format!("crop_side {} != max box side {side}", clip.crop_side));
    }
    if side <= cfg.min_box {
        return bad(format!("crop_side {side} does not exceed min_box"));
    }
    Ok(())
}
