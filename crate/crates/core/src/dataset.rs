//! Clip lookups shared by the miner and the evaluation set generator.

use std::collections::{BTreeMap, HashMap};

use crate::ingest::{ClipManifest, ClipSpec, CoOccurrenceGraph, TrackKey};

pub struct ClipIndex<'m> {
    clips: &'m [ClipSpec],
    position: HashMap<u64, usize>,
    by_track: BTreeMap<TrackKey, Vec<u64>>,
    graph: CoOccurrenceGraph,
    neighbors: BTreeMap<TrackKey, Vec<TrackKey>>,
}

impl<'m> ClipIndex<'m> {
    pub fn new(manifest: &'m ClipManifest) -> Self {
        Self::from_parts(&manifest.clips, manifest.graph())
    }

    pub fn from_parts(clips: &'m [ClipSpec], graph: CoOccurrenceGraph) -> Self {
        let mut by_track: BTreeMap<TrackKey, Vec<u64>> = BTreeMap::new();
        let mut position = HashMap::with_capacity(clips.len());
        for (i, c) in clips.iter().enumerate() {
            by_track.entry(c.track_key()).or_default().push(c.clip_id);
            position.insert(c.clip_id, i);
        }
        let neighbors = graph.neighbors();
        Self {
            clips,
            position,
            by_track,
            graph,
            neighbors,
        }
    }

    pub fn clip(&self, clip_id: u64) -> Option<&'m ClipSpec> {
        self.position.get(&clip_id).map(|&i| &self.clips[i])
    }

    pub fn clips(&self) -> &'m [ClipSpec] {
        self.clips
    }

    pub fn graph(&self) -> &CoOccurrenceGraph {
        &self.graph
    }

    pub fn track_clips(&self, track: TrackKey) -> &[u64] {
        self.by_track.get(&track).map_or(&[], Vec::as_slice)
    }

    pub fn tracks(&self) -> impl Iterator<Item = (TrackKey, &[u64])> {
        self.by_track.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Clips of every track co-occurring with `track`, in track then clip order.
    pub fn negative_pool(&self, track: TrackKey) -> Vec<u64> {
        self.neighbors
            .get(&track)
            .into_iter()
            .flatten()
            .flat_map(|n| self.track_clips(*n).iter().copied())
            .collect()
    }

    /// Tracks with at least `min_clips` clips and a non-empty negative pool.
    pub fn anchor_tracks(&self, min_clips: usize) -> Vec<TrackKey> {
        self.by_track
            .iter()
            .filter(|(k, v)| v.len() >= min_clips && !self.negative_pool(**k).is_empty())
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn track_of(&self, clip_id: u64) -> Option<TrackKey> {
        self.clip(clip_id).map(ClipSpec::track_key)
    }
}
