//! First-stage retrieval of a short, target-relevant subsequence from a
//! lifelong history: exact top-K by cosine ("soft") or exact match of the
//! top-level semantic code through a per-user inverted index ("hard").

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{BehaviorEvent, Corpus, History};
use crate::error::{Error, Result};
use crate::quantizer::SemIdMap;
use crate::similarity::{bucketize, cosine_with_norms, BucketConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Soft,
    Hard,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Soft => "soft",
            Strategy::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    None,
    /// Most recent visible events when the code has no match.
    Recency,
}

/// Which path produced a retrieved sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalTag {
    Soft,
    Hard,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GsuConfig {
    pub strategy: Strategy,
    pub k_ret: usize,
    pub fallback: FallbackPolicy,
}

impl Default for GsuConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Soft,
            k_ret: 50,
            fallback: FallbackPolicy::Recency,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEvent {
    pub item_id: u64,
    /// Dense corpus position of the item.
    pub item: u32,
    pub timestamp: i64,
    pub similarity: f64,
    pub bucket: usize,
}

/// Retrieved behaviors in timestamp-ascending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSequence {
    pub events: Vec<RetrievedEvent>,
    pub tag: RetrievalTag,
}

impl RetrievedSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Highest similarity among the retrieved events.
    pub fn max_similarity(&self) -> Option<f64> {
        self.events.iter().map(|e| e.similarity).max_by(f64::total_cmp)
    }
}

/// The target side of a retrieval query.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub embedding: &'a [f32],
    pub norm: f64,
    pub bucket: &'a BucketConfig,
}

impl<'a> Target<'a> {
    pub fn of_item(corpus: &'a Corpus, item: usize, bucket: &'a BucketConfig) -> Self {
        Self {
            embedding: corpus.embedding(item),
            norm: corpus.norm(item),
            bucket,
        }
    }

    fn annotate(&self, corpus: &Corpus, event: &BehaviorEvent, item: u32) -> RetrievedEvent {
        let i = item as usize;
        let s = cosine_with_norms(corpus.embedding(i), corpus.norm(i), self.embedding, self.norm);
        RetrievedEvent {
            item_id: event.item_id,
            item,
            timestamp: event.timestamp,
            similarity: s,
            bucket: bucketize(s, self.bucket),
        }
    }
}

/// Approximate bytes read while serving queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    pub bytes: u64,
}

const EVENT_BYTES: u64 = std::mem::size_of::<BehaviorEvent>() as u64 + 4;

fn search_steps(n: usize) -> u64 {
    64 - (n as u64).leading_zeros() as u64
}

fn embedding_bytes(corpus: &Corpus) -> u64 {
    corpus.dim() as u64 * 4 + 8
}

/// Ranking used for soft retrieval: higher similarity, then more recent,
/// then lower item id, then later position.
fn soft_order(a: &(f64, i64, u64, usize), b: &(f64, i64, u64, usize)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then(b.1.cmp(&a.1))
        .then(a.2.cmp(&b.2))
        .then(b.3.cmp(&a.3))
}

/// Exact top-`k_ret` of `history` by cosine to the target.
pub fn soft_retrieve(corpus: &Corpus, history: History<'_>, target: &Target<'_>, k_ret: usize) -> RetrievedSequence {
    soft_retrieve_counted(corpus, history, target, k_ret, &mut Cost::default())
}

pub fn soft_retrieve_counted(
    corpus: &Corpus,
    history: History<'_>,
    target: &Target<'_>,
    k_ret: usize,
    cost: &mut Cost,
) -> RetrievedSequence {
    let mut scored: Vec<(f64, i64, u64, usize)> = history
        .events
        .iter()
        .zip(history.items)
        .enumerate()
        .map(|(pos, (e, &i))| {
            let i = i as usize;
            let s = cosine_with_norms(corpus.embedding(i), corpus.norm(i), target.embedding, target.norm);
            (s, e.timestamp, e.item_id, pos)
        })
        .collect();
    cost.bytes += history.len() as u64 * (EVENT_BYTES + embedding_bytes(corpus));

    if k_ret == 0 {
        scored.clear();
    } else if scored.len() > k_ret {
        scored.select_nth_unstable_by(k_ret - 1, soft_order);
        scored.truncate(k_ret);
    }
    scored.sort_unstable_by_key(|&(_, _, _, pos)| pos);
    let events = scored
        .into_iter()
        .map(|(s, ts, item_id, pos)| RetrievedEvent {
            item_id,
            item: history.items[pos],
            timestamp: ts,
            similarity: s,
            bucket: bucketize(s, target.bucket),
        })
        .collect();
    RetrievedSequence {
        events,
        tag: RetrievalTag::Soft,
    }
}

/// Per-user map from top-level code to history positions.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    pub user_id: u64,
    postings: BTreeMap<u32, Vec<u32>>,
    events: Vec<BehaviorEvent>,
    items: Vec<u32>,
}

/// Indexes every event of `history` by its item's top-level code.
pub fn build_index(user_id: u64, history: History<'_>, semids: &SemIdMap) -> Result<InvertedIndex> {
    let mut postings: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut missing = BTreeSet::new();
    for (pos, e) in history.events.iter().enumerate() {
        match semids.get(&e.item_id) {
            Some(id) => postings.entry(id.top()).or_default().push(pos as u32),
            None => {
                missing.insert(e.item_id);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingSemId(missing.into_iter().collect()));
    }
    Ok(InvertedIndex {
        user_id,
        postings,
        events: history.events.to_vec(),
        items: history.items.to_vec(),
    })
}

impl InvertedIndex {
    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    pub fn postings(&self) -> impl Iterator<Item = (u32, &[u32])> {
        self.postings.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    pub fn posting(&self, code: u32) -> &[u32] {
        self.postings.get(&code).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn memory_bytes(&self) -> u64 {
        let lists: u64 = self.postings.values().map(|v| v.len() as u64 * 4 + 32).sum();
        lists + self.events.len() as u64 * EVENT_BYTES
    }
}

/// Events sharing the target's top-level code, visible before `before`,
/// truncated to the `k_ret` most recent.
pub fn hard_retrieve(
    corpus: &Corpus,
    index: &InvertedIndex,
    target_code: u32,
    target: &Target<'_>,
    k_ret: usize,
    fallback: FallbackPolicy,
    before: i64,
) -> RetrievedSequence {
    hard_retrieve_counted(
        corpus,
        index,
        target_code,
        target,
        k_ret,
        fallback,
        before,
        &mut Cost::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn hard_retrieve_counted(
    corpus: &Corpus,
    index: &InvertedIndex,
    target_code: u32,
    target: &Target<'_>,
    k_ret: usize,
    fallback: FallbackPolicy,
    before: i64,
    cost: &mut Cost,
) -> RetrievedSequence {
    let cut = index.events.partition_point(|e| e.timestamp < before);
    let list = index.posting(target_code);
    let visible = &list[..list.partition_point(|&p| (p as usize) < cut)];
    cost.bytes += 8 * search_steps(index.events.len()) + 4 * search_steps(list.len());

    let (positions, tag): (Vec<usize>, _) = if !visible.is_empty() {
        let from = visible.len().saturating_sub(k_ret);
        (
            visible[from..].iter().map(|&p| p as usize).collect(),
            RetrievalTag::Hard,
        )
    } else if fallback == FallbackPolicy::Recency {
        ((cut.saturating_sub(k_ret)..cut).collect(), RetrievalTag::Fallback)
    } else {
        (Vec::new(), RetrievalTag::Hard)
    };
    cost.bytes += positions.len() as u64 * (4 + EVENT_BYTES + embedding_bytes(corpus));
    let events = positions
        .into_iter()
        .map(|p| target.annotate(corpus, &index.events[p], index.items[p]))
        .collect();
    RetrievedSequence { events, tag }
}

/// Per-user indexes over full histories; queries apply the visibility cut.
#[derive(Debug, Clone, Default)]
pub struct IndexSet {
    by_user: BTreeMap<u64, InvertedIndex>,
}

impl IndexSet {
    pub fn build(corpus: &Corpus, semids: &SemIdMap) -> Result<Self> {
        let mut by_user = BTreeMap::new();
        let mut missing = BTreeSet::new();
        for seq in corpus.sequences() {
            let h = corpus.history(seq.user_id, i64::MAX).expect("user exists");
            match build_index(seq.user_id, h, semids) {
                Ok(ix) => {
                    by_user.insert(seq.user_id, ix);
                }
                Err(Error::MissingSemId(ids)) => missing.extend(ids),
                Err(e) => return Err(e),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingSemId(missing.into_iter().collect()));
        }
        Ok(Self { by_user })
    }

    pub fn get(&self, user_id: u64) -> Option<&InvertedIndex> {
        self.by_user.get(&user_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &InvertedIndex> {
        self.by_user.values()
    }

    pub fn memory_bytes(&self) -> u64 {
        self.by_user.values().map(InvertedIndex::memory_bytes).sum()
    }
}

/// Runs the configured strategy for impression `n` of `corpus`.
pub fn retrieve_for_impression(
    corpus: &Corpus,
    n: usize,
    cfg: &GsuConfig,
    bucket: &BucketConfig,
    semids: Option<&SemIdMap>,
    indexes: Option<&IndexSet>,
) -> Result<RetrievedSequence> {
    let imp = &corpus.impressions()[n];
    let target = Target::of_item(corpus, corpus.target_index(n), bucket);
    match cfg.strategy {
        Strategy::Soft => Ok(soft_retrieve(corpus, corpus.visible_history(n), &target, cfg.k_ret)),
        Strategy::Hard => {
            let (semids, indexes) = semids
                .zip(indexes)
                .ok_or_else(|| Error::Config("hard retrieval needs semantic ids and an index".into()))?;
            let code = semids
                .get(&imp.target_item_id)
                .ok_or_else(|| Error::MissingSemId(vec![imp.target_item_id]))?
                .top();
            let index = indexes
                .get(imp.user_id)
                .ok_or_else(|| Error::Internal(format!("no index for user {}", imp.user_id)))?;
            Ok(hard_retrieve(
                corpus,
                index,
                code,
                &target,
                cfg.k_ret,
                cfg.fallback,
                imp.event_time,
            ))
        }
    }
}

/// Latency and memory-traffic summary for one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub strategy: String,
    pub queries: usize,
    pub p50_ns: u64,
    pub p99_ns: u64,
    /// Mean bytes read per query.
    pub bytes_touched: u64,
    /// Bytes held by the structure the strategy queries.
    pub index_bytes: u64,
    pub mean_returned: f64,
}

fn quantile_ns(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

/// Times `strategy` over the impressions of `corpus` (at most `max_queries`,
/// all if 0). Index construction is not timed.
pub fn bench_retrieval(
    corpus: &Corpus,
    semids: &SemIdMap,
    bucket: &BucketConfig,
    strategy: Strategy,
    k_ret: usize,
    max_queries: usize,
) -> Result<CostReport> {
    let n_queries = if max_queries == 0 {
        corpus.impressions().len()
    } else {
        max_queries.min(corpus.impressions().len())
    };
    let indexes = match strategy {
        Strategy::Hard => Some(IndexSet::build(corpus, semids)?),
        Strategy::Soft => None,
    };
    let index_bytes = match &indexes {
        Some(ix) => ix.memory_bytes(),
        None => corpus
            .sequences()
            .iter()
            .map(|s| s.events.len() as u64 * (EVENT_BYTES + embedding_bytes(corpus)))
            .sum(),
    };

    let mut times = Vec::with_capacity(n_queries);
    let mut cost = Cost::default();
    let mut returned = 0usize;
    for n in 0..n_queries {
        let imp = &corpus.impressions()[n];
        let target = Target::of_item(corpus, corpus.target_index(n), bucket);
        let start = Instant::now();
        let out = match &indexes {
            None => soft_retrieve_counted(corpus, corpus.visible_history(n), &target, k_ret, &mut cost),
            Some(ix) => {
                let code = semids
                    .get(&imp.target_item_id)
                    .ok_or_else(|| Error::MissingSemId(vec![imp.target_item_id]))?
                    .top();
                let index = ix.get(imp.user_id).expect("every user is indexed");
                hard_retrieve_counted(
                    corpus,
                    index,
                    code,
                    &target,
                    k_ret,
                    FallbackPolicy::Recency,
                    imp.event_time,
                    &mut cost,
                )
            }
        };
        times.push(start.elapsed().as_nanos() as u64);
        returned += black_box(out).len();
    }
    times.sort_unstable();
    let q = n_queries.max(1) as u64;
    Ok(CostReport {
        strategy: strategy.name().to_string(),
        queries: n_queries,
        p50_ns: quantile_ns(&times, 0.5),
        p99_ns: quantile_ns(&times, 0.99),
        bytes_touched: cost.bytes / q,
        index_bytes,
        mean_returned: returned as f64 / q as f64,
    })
}
