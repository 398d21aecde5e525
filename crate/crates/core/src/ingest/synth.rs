//! Synthetic enclosure videos for desk-scale runs.
//!
//! Each identity is an elliptical textured patch with its own base colour,
//! stripe frequency/orientation, face-mask shade, body size and motion
//! rhythm. Videos are rendered at one frame per second on top of a smooth
//! per-video background; identities can leave and re-enter, and every
//! visible stretch becomes a new track, as with real annotations.
//!
//! Everything is a pure function of the seed: tracks and pixels are
//! reproducible and frames can be rendered in any order.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use super::{BoundingBox, Frame, FrameSource, Track, TrackKey};
use crate::seed;

/// Visible-stretch and gap lengths, in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Presence {
    pub min_visible: u32,
    pub max_visible: u32,
    pub min_gap: u32,
    pub max_gap: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    /// `None` keeps every identity visible for the whole video.
    pub presence: Option<Presence>,
    /// Probability that an individual box is flagged occluded.
    pub occlusion_rate: f64,
}

impl SynthConfig {
    pub fn new(n_identities: usize, seed: u64) -> Self {
        Self {
            n_identities,
            width: 400,
            height: 300,
            seed,
            presence: None,
            occlusion_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Identity {
    base: [f64; 3],
    stripe: [f64; 3],
    mask: f64,
    contrast: f64,
    freq: f64,
    angle: f64,
    size: (f64, f64),
    omega: f64,
    amplitude: (f64, f64),
}

impl Identity {
    fn draw(seed: u64, index: usize) -> Self {
        let mut rng = seed::stream(seed, "synth-identity", &[index as u64]);
        let brown = [0.62, 0.48, 0.32];
        let base = brown.map(|c| (c + rng.random_range(-0.22..0.22f64)).clamp(0.05, 0.95));
        let stripe = [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        ];
        Self {
            base,
            stripe,
            mask: rng.random_range(0.2..0.8),
            contrast: rng.random_range(0.25..0.65),
            freq: rng.random_range(0.12..0.45),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            size: (rng.random_range(76.0..104.0), rng.random_range(74.0..100.0)),
            omega: rng.random_range(0.05..0.3),
            amplitude: (rng.random_range(20.0..90.0), rng.random_range(15.0..60.0)),
        }
    }
}

/// Box geometry of an identity at one second.
#[derive(Clone, Copy, Debug)]
struct Placement {
    identity: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub video_id: u32,
    pub duration_s: u32,
    pub tracks: Vec<Track>,
    /// Identity behind each track.
    pub identities: BTreeMap<TrackKey, usize>,
    placements: Vec<Vec<Placement>>,
    background: Vec<f32>,
    light_phase: f64,
}

/// A population of identities shared by every video it renders.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    cfg: SynthConfig,
    identities: Vec<Identity>,
}

impl SynthWorld {
    pub fn new(cfg: SynthConfig) -> Self {
        let identities = (0..cfg.n_identities)
            .map(|i| Identity::draw(cfg.seed, i))
            .collect();
        Self { cfg, identities }
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn video(&self, video_id: u32, duration_s: u32) -> SynthVideo {
        let cfg = &self.cfg;
        let (w, h) = (f64::from(cfg.width), f64::from(cfg.height));
        let vid = u64::from(video_id);
        let mut scene = seed::stream(cfg.seed, "synth-video", &[vid]);
        let bg = [
            scene.random_range(0.55..0.8),
            scene.random_range(0.5..0.7),
            scene.random_range(0.3..0.5),
        ];
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    scene.random_range(-0.05..0.05),
                    scene.random_range(-0.05..0.05),
                    scene.random_range(0.0..6.3),
                    scene.random_range(0.03..0.09),
                )
            })
            .collect();
        let light_phase = scene.random_range(0.0..6.3);
        let mut background = Vec::with_capacity((cfg.width * cfg.height * 3) as usize);
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let shade: f64 = waves
                    .iter()
                    .map(|&(kx, ky, p, a)| a * (kx * f64::from(x) + ky * f64::from(y) + p).sin())
                    .sum();
                for c in bg {
                    background.push((c + shade).clamp(0.0, 1.0) as f32);
                }
            }
        }

        let mut placements = vec![Vec::new(); duration_s as usize];
        let mut spans: Vec<(u32, u32, usize)> = Vec::new();
        for (i, ident) in self.identities.iter().enumerate() {
            let mut rng = seed::stream(cfg.seed, "synth-motion", &[vid, i as u64]);
            let anchor = (
                rng.random_range(0.2 * w..0.8 * w),
                rng.random_range(0.25 * h..0.75 * h),
            );
            let phases: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..6.3));
            for t in 0..duration_s {
                let tf = f64::from(t);
                let wt = ident.omega * tf;
                let bw = ident.size.0 * (1.0 + 0.06 * (0.7 * tf + phases[2]).sin());
                let bh = ident.size.1 * (1.0 + 0.06 * (0.5 * tf + phases[3]).sin());
                let cx = anchor.0
                    + ident.amplitude.0 * ((wt + phases[0]).sin() + 0.3 * (2.3 * wt).sin());
                let cy = anchor.1
                    + ident.amplitude.1 * ((0.8 * wt + phases[1]).cos() + 0.3 * (1.7 * wt).cos());
                placements[t as usize].push(Placement {
                    identity: i,
                    cx: cx.clamp(bw / 2.0, w - bw / 2.0),
                    cy: cy.clamp(bh / 2.0, h - bh / 2.0),
                    w: bw,
                    h: bh,
                });
            }
            let mut presence = seed::stream(cfg.seed, "synth-presence", &[vid, i as u64]);
            match cfg.presence {
                None => spans.push((0, duration_s, i)),
                Some(p) => {
                    let mut t = presence.random_range(0..=p.max_gap);
                    while t < duration_s {
                        let len = presence.random_range(p.min_visible..=p.max_visible);
                        let end = (t + len).min(duration_s);
                        spans.push((t, end, i));
                        t = end + presence.random_range(p.min_gap..=p.max_gap);
                    }
                }
            }
        }
        // Identities can be invisible; their placements are only drawn
        // while a span covers the frame.
        spans.sort_by_key(|&(start, _, i)| (start, i));
        let mut visible = vec![vec![false; self.identities.len()]; duration_s as usize];
        let mut tracks = Vec::new();
        let mut identities = BTreeMap::new();
        for (n, &(start, end, i)) in spans.iter().enumerate() {
            let track_id = n as u32 + 1;
            let mut occl = seed::stream(cfg.seed, "synth-occlusion", &[vid, u64::from(track_id)]);
            let boxes = (start..end)
                .map(|t| {
                    visible[t as usize][i] = true;
                    let p = placements[t as usize][i];
                    BoundingBox {
                        frame_index: u64::from(t),
                        x: p.cx - p.w / 2.0,
                        y: p.cy - p.h / 2.0,
                        w: p.w,
                        h: p.h,
                        occluded: occl.random::<f64>() < cfg.occlusion_rate,
                    }
                })
                .collect();
            let track = Track {
                track_id,
                video_id,
                boxes,
            };
            identities.insert(track.key(), i);
            tracks.push(track);
        }
        for (t, list) in placements.iter_mut().enumerate() {
            list.retain(|p| visible[t][p.identity]);
            list.sort_by(|a, b| a.cy.total_cmp(&b.cy).then(a.identity.cmp(&b.identity)));
        }
        SynthVideo {
            video_id,
            duration_s,
            tracks,
            identities,
            placements,
            background,
            light_phase,
        }
    }

    fn render(&self, video: &SynthVideo, t: u32) -> Frame {
        let cfg = &self.cfg;
        let mut frame = Frame::new(cfg.width, cfg.height);
        let tf = f64::from(t);
        let light = 1.0 + 0.08 * (0.3 * tf + video.light_phase).sin();
        let mut rgb: Vec<f64> = video.background.iter().map(|&v| f64::from(v) * light).collect();
        for p in &video.placements[t as usize] {
            let ident = &self.identities[p.identity];
            let (rx, ry) = (p.w / 2.0, p.h / 2.0);
            let (ca, sa) = (ident.angle.cos(), ident.angle.sin());
            let x0 = (p.cx - rx).floor().max(0.0) as u32;
            let x1 = ((p.cx + rx).ceil() as u32).min(cfg.width);
            let y0 = (p.cy - ry).floor().max(0.0) as u32;
            let y1 = ((p.cy + ry).ceil() as u32).min(cfg.height);
            for y in y0..y1 {
                let dy = f64::from(y) + 0.5 - p.cy;
                for x in x0..x1 {
                    let dx = f64::from(x) + 0.5 - p.cx;
                    if (dx / rx).powi(2) + (dy / ry).powi(2) > 1.0 {
                        continue;
                    }
                    let u = dx * ca + dy * sa;
                    let s = 0.5 + 0.5 * (ident.freq * u + 0.4 * tf).sin();
                    let mix = ident.contrast * s;
                    let shade = if dy < -0.3 * p.h && dx.abs() < 0.35 * p.w {
                        ident.mask
                    } else {
                        1.0
                    };
                    let i = ((y * cfg.width + x) * 3) as usize;
                    for c in 0..3 {
                        rgb[i + c] =
                            (ident.base[c] * (1.0 - mix) + ident.stripe[c] * mix) * shade * light;
                    }
                }
            }
        }
        for (dst, v) in frame.data.iter_mut().zip(rgb) {
            *dst = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        frame
    }
}

/// Renders frames of a set of synthetic videos on demand.
pub struct SynthFrames {
    world: SynthWorld,
    videos: BTreeMap<u32, SynthVideo>,
}

impl SynthFrames {
    pub fn new(world: SynthWorld, videos: impl IntoIterator<Item = SynthVideo>) -> Self {
        Self {
            world,
            videos: videos.into_iter().map(|v| (v.video_id, v)).collect(),
        }
    }

    pub fn videos(&self) -> impl Iterator<Item = &SynthVideo> {
        self.videos.values()
    }

    pub fn tracks(&self) -> Vec<Track> {
        self.videos.values().flat_map(|v| v.tracks.clone()).collect()
    }

    pub fn identity_of(&self, key: TrackKey) -> Option<usize> {
        self.videos.get(&key.video_id)?.identities.get(&key).copied()
    }

    /// Writes every frame as `<root>/<video_id>/<frame:06>.png`.
    pub fn write_pngs(&self, root: &std::path::Path) -> std::io::Result<()> {
        let jobs: Vec<(u32, u32)> = self
            .videos
            .values()
            .flat_map(|v| (0..v.duration_s).map(move |t| (v.video_id, t)))
            .collect();
        for v in self.videos.keys() {
            std::fs::create_dir_all(root.join(v.to_string()))?;
        }
        jobs.par_iter().try_for_each(|&(v, t)| {
            let frame = self.frame(v, u64::from(t)).map_err(std::io::Error::other)?;
            let path = super::DirFrameSource::path_for(root, v, u64::from(t));
            frame.to_image().save(&path).map_err(std::io::Error::other)
        })
    }
}

impl FrameSource for SynthFrames {
    fn frame(&self, video_id: u32, frame_index: u64) -> Result<Frame, String> {
        let video = self
            .videos
            .get(&video_id)
            .ok_or_else(|| format!("no synthetic video {video_id}"))?;
        if frame_index >= u64::from(video.duration_s) {
            return Err(format!(
                "frame {frame_index} beyond {} s video {video_id}",
                video.duration_s
            ));
        }
        Ok(self.world.render(video, frame_index as u32))
    }
}

/// Continuously visible identities in a single video (id 0).
pub fn synth_tracks(n_identities: usize, duration_s: u32, seed: u64) -> (Vec<Track>, SynthFrames) {
    let world = SynthWorld::new(SynthConfig::new(n_identities, seed));
    let video = world.video(0, duration_s);
    let tracks = video.tracks.clone();
    (tracks, SynthFrames::new(world, [video]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_cooccurrence, ingest, IngestConfig};

    #[test]
    fn same_seed_same_tracks_and_pixels() {
        let (ta, fa) = synth_tracks(3, 20, 5);
        let (tb, fb) = synth_tracks(3, 20, 5);
        assert_eq!(ta, tb);
        assert_eq!(fa.frame(0, 7).unwrap(), fb.frame(0, 7).unwrap());
        let (tc, _) = synth_tracks(3, 20, 6);
        assert_ne!(ta, tc);
    }

    #[test]
    fn two_identities_cooccur() {
        let (tracks, _) = synth_tracks(2, 60, 1);
        assert_eq!(tracks.len(), 2);
        assert_eq!(build_cooccurrence(&tracks).len(), 1);
        for t in &tracks {
            t.validate().unwrap();
            assert!(t.boxes.iter().all(|b| b.max_side() > 70.0));
        }
    }

    #[test]
    fn lone_identity_is_not_minable() {
        let (tracks, _) = synth_tracks(1, 60, 1);
        let cfg = IngestConfig {
            resize_to: 32,
            ..Default::default()
        };
        let manifest = ingest(&tracks, &cfg).unwrap();
        assert!(manifest.stats.n_clips > 0);
        assert!(!manifest.stats.mining_eligible);
        assert!(manifest.stats.warnings.iter().any(|w| w.contains("ineligible")));
    }

    #[test]
    fn presence_splits_identities_into_tracks() {
        let cfg = SynthConfig {
            presence: Some(Presence {
                min_visible: 20,
                max_visible: 40,
                min_gap: 5,
                max_gap: 15,
            }),
            ..SynthConfig::new(4, 2)
        };
        let world = SynthWorld::new(cfg);
        let video = world.video(3, 200);
        assert!(video.tracks.len() > 4);
        // A single identity never co-occurs with itself.
        let graph = build_cooccurrence(&video.tracks);
        for (a, b) in graph.edges() {
            assert_ne!(video.identities[&a], video.identities[&b]);
        }
        let frames = SynthFrames::new(world, [video]);
        assert!(frames.frame(3, 199).is_ok());
        assert!(frames.frame(3, 200).is_err());
        assert!(frames.frame(0, 0).is_err());
    }
}
