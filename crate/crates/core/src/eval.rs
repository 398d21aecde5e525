//! Query/gallery evaluation.
//!
//! A set holds two clips of one track and nine clips of co-occurring tracks.
//! Each positive in turn is the query; the gallery is the other positive
//! plus the nine negatives. A query scores a top-k hit when the other
//! positive is among its k nearest gallery items by Euclidean distance.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ClipIndex;
use crate::distance::euclidean;
use crate::ingest::ClipSpec;
use crate::seed::{derive, stream};

pub const N_NEGATIVES: usize = 9;
pub const GALLERY_SIZE: usize = N_NEGATIVES + 1;
/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot build evaluation sets: {0}")]
    Insufficient(String),
    #[error("empty gallery")]
    EmptyGallery,
    #[error("embeddings must be finite and of equal dimension")]
    BadEmbeddings,
    #[error("embedding clip {clip_id}: {message}")]
    Embed { clip_id: u64, message: String },
    #[error("invalid evaluation set {set_id}: {message}")]
    InvalidSet { set_id: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSet {
    pub positives: [u64; 2],
    pub negatives: [u64; N_NEGATIVES],
}

/// Drops sets whose two positives were cropped from largely the same
/// place: the mean, over frame positions, of the intersection-over-union
/// of their crop squares must not exceed `max_iou`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapFilter {
    pub max_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSets {
    pub sets: Vec<EvalSet>,
    pub seed: u64,
    pub filter: Option<OverlapFilter>,
}

impl EvalSets {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Every clip referenced, ascending.
    pub fn clip_ids(&self) -> Vec<u64> {
        self.sets
            .iter()
            .flat_map(|s| s.positives.iter().chain(&s.negatives).copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

fn square_iou(a: (f64, f64), b: (f64, f64), side_a: f64, side_b: f64) -> f64 {
    let overlap = |ca: f64, cb: f64| {
        let lo = (ca - side_a / 2.0).max(cb - side_b / 2.0);
        let hi = (ca + side_a / 2.0).min(cb + side_b / 2.0);
        (hi - lo).max(0.0)
    };
    let inter = overlap(a.0, b.0) * overlap(a.1, b.1);
    inter / (side_a * side_a + side_b * side_b - inter)
}

/// Mean crop-square IoU of two clips over aligned frame positions.
pub fn crop_overlap(a: &ClipSpec, b: &ClipSpec) -> f64 {
    if a.video_id != b.video_id {
        return 0.0;
    }
    let n = a.crop_centers.len().min(b.crop_centers.len());
    if n == 0 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|i| square_iou(a.crop_centers[i], b.crop_centers[i], a.crop_side, b.crop_side))
        .sum();
    total / n as f64
}

/// Checks cardinalities, distinctness, and co-occurrence of one set.
pub fn validate_set(index: &ClipIndex<'_>, set_id: usize, set: &EvalSet) -> Result<(), EvalError> {
    let fail = |m: String| EvalError::InvalidSet { set_id, message: m };
    let all: BTreeSet<_> = set.positives.iter().chain(&set.negatives).collect();
    if all.len() != 2 + N_NEGATIVES {
        return Err(fail("clips are not distinct".into()));
    }
    let track = |c: u64| index.track_of(c).ok_or_else(|| fail(format!("unknown clip {c}")));
    let t = track(set.positives[0])?;
    if track(set.positives[1])? != t {
        return Err(fail("positives come from different tracks".into()));
    }
    for &n in &set.negatives {
        let nt = track(n)?;
        if nt == t || !index.graph().contains(t, nt) {
            return Err(fail(format!("negative {n} does not co-occur with track {t}")));
        }
    }
    Ok(())
}

/// Draws `n_sets` sets: a track with at least two clips and nine
/// co-occurring clips is picked uniformly, then two of its clips and nine
/// negatives are sampled without replacement. Negatives may repeat a track.
pub fn generate_eval_sets(
    index: &ClipIndex<'_>,
    n_sets: usize,
    seed: u64,
    filter: Option<OverlapFilter>,
) -> Result<EvalSets, EvalError> {
    let with_pairs: Vec<_> = index.tracks().filter(|(_, c)| c.len() >= 2).map(|(t, _)| t).collect();
    if with_pairs.is_empty() {
        return Err(EvalError::Insufficient("no track has at least 2 clips".into()));
    }
    let pools: Vec<_> = with_pairs.iter().map(|&t| (t, index.negative_pool(t))).collect();
    let best = pools.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
    let eligible: Vec<_> = pools.into_iter().filter(|(_, p)| p.len() >= N_NEGATIVES).collect();
    if eligible.is_empty() {
        return Err(EvalError::Insufficient(format!(
            "no track with at least 2 clips has {N_NEGATIVES} co-occurring negative clips (most found: {best})"
        )));
    }
    let mut rng = stream(seed, "eval-sets", &[]);
    let budget = 100 * n_sets.max(1);
    let mut sets = Vec::with_capacity(n_sets);
    let mut attempts = 0;
    while sets.len() < n_sets {
        if attempts == budget {
            return Err(EvalError::Insufficient(format!(
                "overlap filter rejected too many candidates ({} of {n_sets} sets after {budget} draws)",
                sets.len()
            )));
        }
        attempts += 1;
        let (track, pool) = &eligible[rng.random_range(0..eligible.len())];
        let own = index.track_clips(*track);
        let p = index::sample(&mut rng, own.len(), 2);
        let positives = [own[p.index(0)], own[p.index(1)]];
        let mut negatives = [0; N_NEGATIVES];
        for (slot, i) in negatives.iter_mut().zip(index::sample(&mut rng, pool.len(), N_NEGATIVES)) {
            *slot = pool[i];
        }
        if let Some(f) = filter {
            let (a, b) = (index.clip(positives[0]), index.clip(positives[1]));
            if crop_overlap(a.expect("indexed"), b.expect("indexed")) > f.max_iou {
                continue;
            }
        }
        sets.push(EvalSet { positives, negatives });
    }
    Ok(EvalSets { sets, seed, filter })
}

/// Gallery indices by ascending distance to the query; equal distances keep
/// the lower index first.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>]) -> Result<Vec<usize>, EvalError> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let ok = |v: &[f64]| v.len() == query.len() && v.iter().all(|x| x.is_finite());
    if !ok(query) || !gallery.iter().all(|g| ok(g)) {
        return Err(EvalError::BadEmbeddings);
    }
    let d: Vec<f64> = gallery.iter().map(|g| euclidean(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    Ok(order)
}

/// Slot of the true match within the gallery of `(set, query)`.
pub fn match_slot(seed: u64, set_id: usize, query: usize) -> usize {
    (derive(seed, "gallery-slot", &[set_id as u64, query as u64]) % GALLERY_SIZE as u64) as usize
}

/// Gallery clip ids for one query: the negatives in set order with the
/// other positive inserted at [`match_slot`].
pub fn gallery_for(set: &EvalSet, seed: u64, set_id: usize, query: usize) -> (Vec<u64>, usize) {
    let slot = match_slot(seed, set_id, query);
    let mut g: Vec<u64> = set.negatives.to_vec();
    g.insert(slot, set.positives[1 - query]);
    (g, slot)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub set_id: usize,
    pub query_clip: u64,
    pub positive_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_sets: usize,
    pub n_queries: usize,
    pub top1: f64,
    pub top3: f64,
    pub top1_ci95: [f64; 2],
    pub top3_ci95: [f64; 2],
    /// Hit rate for k = 1..=10.
    pub topk: Vec<f64>,
    pub gallery_size: usize,
    pub negatives_policy: String,
    pub seed: u64,
    pub ranks: Vec<RankRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// `set_id,query_clip,positive_rank`
    pub fn write_ranks_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.ranks {
            out.serialize(r)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Wilson score interval for `hits` successes out of `n`.
pub fn wilson_interval(hits: usize, n: usize) -> [f64; 2] {
    if n == 0 {
        return [0.0, 1.0];
    }
    let n = n as f64;
    let p = hits as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    // the bounds touch 0 and 1 exactly when no query or every query hits
    let lo = if hits == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if p == 1.0 { 1.0 } else { (center + half).min(1.0) };
    [lo, hi]
}

/// Scores `sets` with an embedding function, called once per distinct clip.
pub fn evaluate<E>(sets: &EvalSets, embed: E) -> Result<EvalReport, EvalError>
where
    E: Fn(u64) -> Result<Vec<f64>, String> + Sync,
{
    let ids = sets.clip_ids();
    let embeddings: Vec<Vec<f64>> = ids
        .par_iter()
        .map(|&c| embed(c).map_err(|message| EvalError::Embed { clip_id: c, message }))
        .collect::<Result<_, _>>()?;
    let lookup = |c: u64| &embeddings[ids.binary_search(&c).expect("collected")];
    let mut ranks = Vec::with_capacity(2 * sets.sets.len());
    for (set_id, set) in sets.sets.iter().enumerate() {
        for q in 0..2 {
            let (gallery, slot) = gallery_for(set, sets.seed, set_id, q);
            let vectors: Vec<Vec<f64>> = gallery.iter().map(|&c| lookup(c).clone()).collect();
            let order = rank_gallery(lookup(set.positives[q]), &vectors)?;
            let rank = order.iter().position(|&i| i == slot).expect("slot in gallery") + 1;
            ranks.push(RankRow {
                set_id,
                query_clip: set.positives[q],
                positive_rank: rank,
            });
        }
    }
    Ok(report_from_ranks(sets, ranks))
}

fn report_from_ranks(sets: &EvalSets, ranks: Vec<RankRow>) -> EvalReport {
    let n = ranks.len();
    let hits = |k: usize| ranks.iter().filter(|r| r.positive_rank <= k).count();
    let frac = |h: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    let topk: Vec<f64> = (1..=GALLERY_SIZE).map(|k| frac(hits(k))).collect();
    EvalReport {
        n_sets: sets.sets.len(),
        n_queries: n,
        top1: topk[0],
        top3: topk[2],
        top1_ci95: wilson_interval(hits(1), n),
        top3_ci95: wilson_interval(hits(3), n),
        topk,
        gallery_size: GALLERY_SIZE,
        negatives_policy: "9 clips sampled without replacement from all co-occurring tracks; a track may contribute several".into(),
        seed: sets.seed,
        ranks,
    }
}
