//! Candidate sampling under co-occurrence constraints and hard-triplet
//! selection.
//!
//! No identities are known. Clips of one track are positives of each other;
//! clips of any track that shares a frame with it are negatives. From a
//! sampled candidate set the miner keeps the two positives that lie furthest
//! apart and the negative closest to either of them.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::dataset::ClipIndex;
use crate::distance::euclidean;
use crate::ingest::{TrackKey, MIN_ANCHOR_CLIPS};

#[derive(Debug, thiserror::Error)]
pub enum MinerError {
    #[error("ineligible dataset: {0}")]
    Ineligible(String),
    #[error("need at least 2 positives, got {0}")]
    TooFewPositives(usize),
    #[error("need at least 1 negative")]
    NoNegatives,
    #[error("embeddings must be finite and of equal dimension")]
    BadEmbeddings,
    #[error("embedding candidates: {0}")]
    Embed(String),
    #[error("triplet ({anchor}, {positive}, {negative}) violates co-occurrence constraints: {message}")]
    Invalid {
        anchor: u64,
        positive: u64,
        negative: u64,
        message: String,
    },
    #[error("triplet log: {0}")]
    Log(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub anchor_track: TrackKey,
    pub positives: Vec<u64>,
    pub negatives: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Triplet {
    pub anchor: u64,
    pub positive: u64,
    pub negative: u64,
}

/// Positions within the positive and negative candidate lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MinedIndices {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinedTriplet {
    pub triplet: Triplet,
    pub anchor_track: TrackKey,
    /// Distances at mining time (dropout off).
    pub d_ap: f64,
    pub d_an: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletBatch {
    pub triplets: Vec<MinedTriplet>,
}

impl TripletBatch {
    /// Every clip slot of the batch, three per triplet.
    pub fn clip_slots(&self) -> Vec<u64> {
        self.triplets
            .iter()
            .flat_map(|t| [t.triplet.anchor, t.triplet.positive, t.triplet.negative])
            .collect()
    }
}

/// Tracks that may serve as anchors.
pub fn eligible_anchors(index: &ClipIndex<'_>) -> Result<Vec<TrackKey>, MinerError> {
    let anchors = index.anchor_tracks(MIN_ANCHOR_CLIPS);
    if anchors.is_empty() {
        return Err(MinerError::Ineligible(format!(
            "no track has at least {MIN_ANCHOR_CLIPS} clips and a co-occurring track with clips"
        )));
    }
    Ok(anchors)
}

fn sample_without_replacement<R: Rng + ?Sized>(rng: &mut R, pool: &[u64], cap: usize) -> Vec<u64> {
    index::sample(rng, pool.len(), cap.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Up to `j` positives and `k` negatives for a given anchor track.
pub fn sample_candidates_for<R: Rng + ?Sized>(
    index: &ClipIndex<'_>,
    anchor_track: TrackKey,
    j: usize,
    k: usize,
    rng: &mut R,
) -> Result<CandidateSet, MinerError> {
    let own = index.track_clips(anchor_track);
    let pool = index.negative_pool(anchor_track);
    if own.len() < 2 || pool.is_empty() || j < 2 || k == 0 {
        return Err(MinerError::Ineligible(format!(
            "track {anchor_track} has {} clips and {} negative clips (j={j}, k={k})",
            own.len(),
            pool.len()
        )));
    }
    Ok(CandidateSet {
        anchor_track,
        positives: sample_without_replacement(rng, own, j),
        negatives: sample_without_replacement(rng, &pool, k),
    })
}

/// Draws the anchor track uniformly among eligible tracks, then samples
/// its candidates.
pub fn sample_candidates<R: Rng + ?Sized>(
    index: &ClipIndex<'_>,
    j: usize,
    k: usize,
    rng: &mut R,
) -> Result<CandidateSet, MinerError> {
    let anchors = eligible_anchors(index)?;
    let track = anchors[rng.random_range(0..anchors.len())];
    sample_candidates_for(index, track, j, k, rng)
}

/// Hardest positive pair, then the negative nearest to either member of it.
/// The member nearer to that negative becomes the anchor. Every arg-min and
/// arg-max keeps the lowest index on ties.
pub fn mine_hard_triplet(pos: &[Vec<f64>], neg: &[Vec<f64>]) -> Result<MinedIndices, MinerError> {
    if pos.len() < 2 {
        return Err(MinerError::TooFewPositives(pos.len()));
    }
    if neg.is_empty() {
        return Err(MinerError::NoNegatives);
    }
    let dim = pos[0].len();
    if pos
        .iter()
        .chain(neg)
        .any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite()))
    {
        return Err(MinerError::BadEmbeddings);
    }
    let (mut p1, mut p2, mut best) = (0, 1, f64::NEG_INFINITY);
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let d = euclidean(&pos[i], &pos[j]);
            if d > best {
                (p1, p2, best) = (i, j, d);
            }
        }
    }
    let (mut n_star, mut nearest) = (0, f64::INFINITY);
    let (mut d1_star, mut d2_star) = (0.0, 0.0);
    for (n, v) in neg.iter().enumerate() {
        let d1 = euclidean(&pos[p1], v);
        let d2 = euclidean(&pos[p2], v);
        let d = d1.min(d2);
        if d < nearest {
            (n_star, nearest, d1_star, d2_star) = (n, d, d1, d2);
        }
    }
    let (anchor, positive) = if d2_star < d1_star { (p2, p1) } else { (p1, p2) };
    Ok(MinedIndices {
        anchor,
        positive,
        negative: n_star,
    })
}

/// Re-checks the co-occurrence constraints of a triplet.
pub fn verify_triplet(index: &ClipIndex<'_>, t: &Triplet) -> Result<(), MinerError> {
    let fail = |message: &str| MinerError::Invalid {
        anchor: t.anchor,
        positive: t.positive,
        negative: t.negative,
        message: message.to_string(),
    };
    let track = |c| index.track_of(c).ok_or_else(|| fail("unknown clip"));
    let (a, p, n) = (track(t.anchor)?, track(t.positive)?, track(t.negative)?);
    if t.anchor == t.positive {
        return Err(fail("anchor and positive are the same clip"));
    }
    if a != p {
        return Err(fail("anchor and positive come from different tracks"));
    }
    if n == a || !index.graph().contains(a, n) {
        return Err(fail("negative track does not co-occur with the anchor track"));
    }
    Ok(())
}

/// Mines one triplet per anchor track. `embed` receives the sorted distinct
/// clip ids of all candidate sets and returns their embeddings in that
/// order; it is expected to run without dropout.
pub fn build_batch_for<R, E>(
    index: &ClipIndex<'_>,
    anchors: &[TrackKey],
    j: usize,
    k: usize,
    rng: &mut R,
    embed: E,
) -> Result<TripletBatch, MinerError>
where
    R: Rng + ?Sized,
    E: FnOnce(&[u64]) -> Result<Vec<Vec<f64>>, MinerError>,
{
    let sets = anchors
        .iter()
        .map(|&a| sample_candidates_for(index, a, j, k, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<u64> = sets
        .iter()
        .flat_map(|s| s.positives.iter().chain(&s.negatives).copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let embeddings = embed(&ids)?;
    assert_eq!(embeddings.len(), ids.len(), "embedder returned the wrong count");
    let lookup = |c: &u64| embeddings[ids.binary_search(c).expect("requested")].clone();
    let mut triplets = Vec::with_capacity(sets.len());
    for set in &sets {
        let pos: Vec<_> = set.positives.iter().map(lookup).collect();
        let neg: Vec<_> = set.negatives.iter().map(lookup).collect();
        let m = mine_hard_triplet(&pos, &neg)?;
        let triplet = Triplet {
            anchor: set.positives[m.anchor],
            positive: set.positives[m.positive],
            negative: set.negatives[m.negative],
        };
        verify_triplet(index, &triplet)?;
        triplets.push(MinedTriplet {
            triplet,
            anchor_track: set.anchor_track,
            d_ap: euclidean(&pos[m.anchor], &pos[m.positive]),
            d_an: euclidean(&pos[m.anchor], &neg[m.negative]),
        });
    }
    Ok(TripletBatch { triplets })
}

/// `batch_triplets` triplets with anchors drawn uniformly (with replacement)
/// from the eligible tracks.
pub fn build_batch<R, E>(
    index: &ClipIndex<'_>,
    batch_triplets: usize,
    j: usize,
    k: usize,
    rng: &mut R,
    embed: E,
) -> Result<TripletBatch, MinerError>
where
    R: Rng + ?Sized,
    E: FnOnce(&[u64]) -> Result<Vec<Vec<f64>>, MinerError>,
{
    let eligible = eligible_anchors(index)?;
    let anchors: Vec<_> = (0..batch_triplets)
        .map(|_| eligible[rng.random_range(0..eligible.len())])
        .collect();
    build_batch_for(index, &anchors, j, k, rng, embed)
}

/// One epoch: every eligible anchor track once, in shuffled order, cut into
/// batches of `batch_triplets` (the last may be shorter).
pub fn epoch_plan<R: Rng + ?Sized>(
    index: &ClipIndex<'_>,
    batch_triplets: usize,
    rng: &mut R,
) -> Result<Vec<Vec<TrackKey>>, MinerError> {
    use rand::seq::SliceRandom;
    let mut anchors = eligible_anchors(index)?;
    anchors.shuffle(rng);
    Ok(anchors.chunks(batch_triplets.max(1)).map(<[_]>::to_vec).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TripletLogRow {
    pub epoch: usize,
    pub batch: usize,
    pub anchor_clip: u64,
    pub positive_clip: u64,
    pub negative_clip: u64,
    pub d_ap: f64,
    pub d_an: f64,
}

pub fn write_triplet_log<W: Write>(w: W, rows: &[TripletLogRow]) -> Result<(), MinerError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}
