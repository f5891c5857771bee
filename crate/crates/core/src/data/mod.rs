//! Domain types, corpus file format, synthetic generation and splitting.

mod io;
mod split;
mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_corpus, save_corpus};
pub use split::{split, SplitPolicy};
pub use synth::{generate_synthetic, generate_synthetic_with_truth, PlantedTruth, SynthConfig};

/// One catalog item: categorical ID features plus its multi-modal embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: u64,
    /// Slot index -> vocabulary index.
    pub id_features: Vec<u32>,
    pub mm_embedding: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorEvent {
    pub item_id: u64,
    pub timestamp: i64,
}

/// Lifelong history of one user, ordered by timestamp ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub user_id: u64,
    pub events: Vec<BehaviorEvent>,
}

impl BehaviorSequence {
    /// Events with `timestamp < before`.
    pub fn visible_before(&self, before: i64) -> &[BehaviorEvent] {
        let cut = self.events.partition_point(|e| e.timestamp < before);
        &self.events[..cut]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub user_id: u64,
    pub target_item_id: u64,
    pub context_features: Vec<u32>,
    pub user_features: Vec<u32>,
    pub label: u8,
    pub event_time: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusMeta {
    /// Embedding dimension.
    pub dim: usize,
    pub id_vocab: Vec<u32>,
    pub user_vocab: Vec<u32>,
    pub context_vocab: Vec<u32>,
    pub seed: Option<u64>,
    pub n_items: usize,
    pub n_users: usize,
    pub n_impressions: usize,
}

/// A validated, immutable dataset.
///
/// Construction resolves every item reference once, so downstream code can
/// address items by dense position instead of hashing ids on the hot path.
#[derive(Debug, Clone)]
pub struct Corpus {
    meta: CorpusMeta,
    items: Vec<ItemRecord>,
    sequences: Vec<BehaviorSequence>,
    impressions: Vec<Impression>,
    item_pos: HashMap<u64, usize>,
    user_pos: HashMap<u64, usize>,
    norms: Vec<f64>,
    resolved: Vec<Vec<u32>>,
    target_pos: Vec<u32>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self.items == other.items
            && self.sequences == other.sequences
            && self.impressions == other.impressions
    }
}

/// Visible slice of a user's history with resolved item positions.
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    pub events: &'a [BehaviorEvent],
    pub items: &'a [u32],
}

impl<'a> History<'a> {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

impl Corpus {
    /// Builds a corpus, validating every invariant of the format. Counts in
    /// `meta` are overwritten with the actual record counts.
    pub fn new(
        mut meta: CorpusMeta,
        items: Vec<ItemRecord>,
        sequences: Vec<BehaviorSequence>,
        impressions: Vec<Impression>,
    ) -> Result<Self> {
        meta.n_items = items.len();
        meta.n_users = sequences.len();
        meta.n_impressions = impressions.len();
        Self::validated(meta, items, sequences, impressions)
    }

    /// Like [`Corpus::new`] but also checks the declared counts.
    pub(crate) fn validated(
        meta: CorpusMeta,
        items: Vec<ItemRecord>,
        sequences: Vec<BehaviorSequence>,
        impressions: Vec<Impression>,
    ) -> Result<Self> {
        if meta.dim == 0 {
            return Err(Error::Schema("embedding dimension must be positive".into()));
        }
        for (what, declared, actual) in [
            ("items", meta.n_items, items.len()),
            ("users", meta.n_users, sequences.len()),
            ("impressions", meta.n_impressions, impressions.len()),
        ] {
            if declared != actual {
                return Err(Error::Schema(format!(
                    "meta declares {declared} {what} but {actual} were found"
                )));
            }
        }

        let mut item_pos = HashMap::with_capacity(items.len());
        let mut norms = Vec::with_capacity(items.len());
        for (pos, item) in items.iter().enumerate() {
            if item.mm_embedding.len() != meta.dim {
                return Err(Error::Schema(format!(
                    "item {} has embedding dimension {} but corpus dimension is {}",
                    item.item_id,
                    item.mm_embedding.len(),
                    meta.dim
                )));
            }
            if item.mm_embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!(
                    "item {} has a non-finite embedding",
                    item.item_id
                )));
            }
            if item.id_features.len() != meta.id_vocab.len() {
                return Err(Error::Schema(format!(
                    "item {} has {} id features, expected {}",
                    item.item_id,
                    item.id_features.len(),
                    meta.id_vocab.len()
                )));
            }
            if item_pos.insert(item.item_id, pos).is_some() {
                return Err(Error::Schema(format!("duplicate item id {}", item.item_id)));
            }
            norms.push(l2_norm(&item.mm_embedding));
        }

        let mut user_pos = HashMap::with_capacity(sequences.len());
        let mut resolved = Vec::with_capacity(sequences.len());
        for (pos, seq) in sequences.iter().enumerate() {
            if user_pos.insert(seq.user_id, pos).is_some() {
                return Err(Error::Schema(format!("duplicate sequence for user {}", seq.user_id)));
            }
            if seq.events.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
                return Err(Error::Schema(format!(
                    "events of user {} are not ordered by timestamp",
                    seq.user_id
                )));
            }
            let mut idx = Vec::with_capacity(seq.events.len());
            for e in &seq.events {
                let p = item_pos.get(&e.item_id).ok_or_else(|| {
                    Error::Schema(format!("user {} references unknown item {}", seq.user_id, e.item_id))
                })?;
                idx.push(*p as u32);
            }
            resolved.push(idx);
        }

        let mut target_pos = Vec::with_capacity(impressions.len());
        for (n, imp) in impressions.iter().enumerate() {
            if imp.label > 1 {
                return Err(Error::Schema(format!("impression {n} has label {}", imp.label)));
            }
            if !user_pos.contains_key(&imp.user_id) {
                return Err(Error::Schema(format!(
                    "impression {n} references unknown user {}",
                    imp.user_id
                )));
            }
            let t = item_pos.get(&imp.target_item_id).ok_or_else(|| {
                Error::Schema(format!("impression {n} references unknown item {}", imp.target_item_id))
            })?;
            target_pos.push(*t as u32);
            if imp.user_features.len() != meta.user_vocab.len() {
                return Err(Error::Schema(format!("impression {n} has wrong user feature count")));
            }
            if imp.context_features.len() != meta.context_vocab.len() {
                return Err(Error::Schema(format!("impression {n} has wrong context feature count")));
            }
        }

        Ok(Self {
            meta,
            items,
            sequences,
            impressions,
            item_pos,
            user_pos,
            norms,
            resolved,
            target_pos,
        })
    }

    pub fn meta(&self) -> &CorpusMeta {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn sequences(&self) -> &[BehaviorSequence] {
        &self.sequences
    }

    pub fn impressions(&self) -> &[Impression] {
        &self.impressions
    }

    pub fn item_index(&self, item_id: u64) -> Option<usize> {
        self.item_pos.get(&item_id).copied()
    }

    pub fn user_index(&self, user_id: u64) -> Option<usize> {
        self.user_pos.get(&user_id).copied()
    }

    pub fn embedding(&self, item: usize) -> &[f32] {
        &self.items[item].mm_embedding
    }

    pub fn norm(&self, item: usize) -> f64 {
        self.norms[item]
    }

    /// Dense item position of an impression's target.
    pub fn target_index(&self, impression: usize) -> usize {
        self.target_pos[impression] as usize
    }

    /// Events of `user_id` strictly before `before`.
    pub fn history(&self, user_id: u64, before: i64) -> Option<History<'_>> {
        let u = self.user_index(user_id)?;
        let seq = &self.sequences[u];
        let cut = seq.events.partition_point(|e| e.timestamp < before);
        Some(History {
            events: &seq.events[..cut],
            items: &self.resolved[u][..cut],
        })
    }

    /// The history an impression is allowed to see.
    pub fn visible_history(&self, impression: usize) -> History<'_> {
        let imp = &self.impressions[impression];
        self.history(imp.user_id, imp.event_time)
            .expect("impression users are validated at construction")
    }

    /// Same items and histories, different impression set.
    pub(crate) fn with_impressions(&self, impressions: Vec<Impression>) -> Result<Self> {
        let mut meta = self.meta.clone();
        meta.n_impressions = impressions.len();
        Self::validated(meta, self.items.clone(), self.sequences.clone(), impressions)
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}
