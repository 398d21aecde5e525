use std::collections::{BTreeMap, BTreeSet};

use super::{Track, TrackKey};

/// Unordered pairs of tracks of the same video that share a frame index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CoOccurrenceGraph {
    edges: BTreeSet<(TrackKey, TrackKey)>,
}

impl CoOccurrenceGraph {
    pub fn insert(&mut self, a: TrackKey, b: TrackKey) {
        assert_eq!(a.video_id, b.video_id, "cross-video co-occurrence");
        if a != b {
            self.edges.insert((a.min(b), a.max(b)));
        }
    }

    pub fn contains(&self, a: TrackKey, b: TrackKey) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (TrackKey, TrackKey)> + '_ {
        self.edges.iter().copied()
    }

    pub fn neighbors(&self) -> BTreeMap<TrackKey, Vec<TrackKey>> {
        let mut out: BTreeMap<TrackKey, Vec<TrackKey>> = BTreeMap::new();
        for &(a, b) in &self.edges {
            out.entry(a).or_default().push(b);
            out.entry(b).or_default().push(a);
        }
        for list in out.values_mut() {
            list.sort();
        }
        out
    }

    pub fn triples(&self) -> Vec<[u32; 3]> {
        self.edges
            .iter()
            .map(|(a, b)| [a.video_id, a.track_id, b.track_id])
            .collect()
    }

    pub fn from_triples(triples: &[[u32; 3]]) -> Self {
        let mut g = Self::default();
        for &[video_id, a, b] in triples {
            g.insert(
                TrackKey {
                    video_id,
                    track_id: a,
                },
                TrackKey {
                    video_id,
                    track_id: b,
                },
            );
        }
        g
    }
}

/// Sweeps frames per video and links every pair of tracks visible together.
pub fn build_cooccurrence(tracks: &[Track]) -> CoOccurrenceGraph {
    let mut by_frame: BTreeMap<(u32, u64), Vec<TrackKey>> = BTreeMap::new();
    for t in tracks {
        for b in &t.boxes {
            by_frame
                .entry((t.video_id, b.frame_index))
                .or_default()
                .push(t.key());
        }
    }
    let mut graph = CoOccurrenceGraph::default();
    for present in by_frame.values() {
        for (i, &a) in present.iter().enumerate() {
            for &b in &present[i + 1..] {
                graph.insert(a, b);
            }
        }
    }
    graph
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::BoundingBox;
    use proptest::prelude::*;

    fn track(video_id: u32, track_id: u32, frames: impl IntoIterator<Item = u64>) -> Track {
        Track {
            video_id,
            track_id,
            boxes: frames
                .into_iter()
                .map(|frame_index| BoundingBox {
                    frame_index,
                    x: 0.0,
                    y: 0.0,
                    w: 10.0,
                    h: 10.0,
                    occluded: false,
                })
                .collect(),
        }
    }

    fn brute_force(tracks: &[Track]) -> BTreeSet<(TrackKey, TrackKey)> {
        let mut out = BTreeSet::new();
        for (i, a) in tracks.iter().enumerate() {
            for b in &tracks[i + 1..] {
                let fa: BTreeSet<u64> = a.boxes.iter().map(|x| x.frame_index).collect();
                let shared = b.boxes.iter().any(|x| fa.contains(&x.frame_index));
                if a.video_id == b.video_id && shared {
                    out.insert((a.key().min(b.key()), a.key().max(b.key())));
                }
            }
        }
        out
    }

    #[test]
    fn overlapping_frame_ranges_link() {
        let tracks = [track(0, 1, 1..=10), track(0, 2, 5..=15), track(0, 3, 20..=30)];
        let g = build_cooccurrence(&tracks);
        assert_eq!(g.triples(), vec![[0, 1, 2]]);
        assert_eq!(g.edges().collect::<BTreeSet<_>>(), brute_force(&tracks));
    }

    #[test]
    fn single_track_and_cross_video_give_no_edges() {
        assert!(build_cooccurrence(&[track(0, 1, 0..5)]).is_empty());
        assert!(build_cooccurrence(&[track(0, 1, 0..5), track(1, 2, 0..5)]).is_empty());
        assert!(build_cooccurrence(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn sweep_matches_pairwise_intersection(
            spans in prop::collection::vec((0u32..3, 0u64..60, 1u64..20, 1u64..4), 0..50)
        ) {
            let tracks: Vec<Track> = spans
                .iter()
                .enumerate()
                .map(|(i, &(video, start, len, step))| {
                    track(video, i as u32, (start..start + len * step).step_by(step as usize))
                })
                .collect();
            let g = build_cooccurrence(&tracks);
            prop_assert_eq!(g.edges().collect::<BTreeSet<_>>(), brute_force(&tracks));
            for (a, b) in g.edges() {
                prop_assert!(a != b);
                prop_assert!(g.contains(b, a));
            }
        }
    }
}
