use std::sync::atomic::{AtomicU64, Ordering};

use super::params::ModelParams;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::gsu::RetrievedSequence;
use crate::quantizer::{prefix_tokens, SemId, SemIdMap};

static OOV_LOOKUPS: AtomicU64 = AtomicU64::new(0);

/// Categorical values at or beyond the slot vocabulary that were mapped to
/// the slot's OOV row (process-wide).
pub fn oov_count() -> u64 {
    OOV_LOOKUPS.load(Ordering::Relaxed)
}

/// Row of `value` in a table of `vocab + 1` rows; the last row is OOV.
#[inline]
pub(crate) fn slot_row(value: u32, vocab: u32) -> u32 {
    if value < vocab {
        value
    } else {
        OOV_LOOKUPS.fetch_add(1, Ordering::Relaxed);
        vocab
    }
}

pub(crate) fn slot_rows(values: &[u32], vocab: &[u32], what: &str) -> Result<Vec<u32>> {
    if values.len() != vocab.len() {
        return Err(Error::Input(format!(
            "{} {what} features for {} slots",
            values.len(),
            vocab.len()
        )));
    }
    Ok(values.iter().zip(vocab).map(|(&v, &n)| slot_row(v, n)).collect())
}

/// Table rows of one item: id-slot rows then prefix-table rows.
pub(crate) fn item_rows(
    params: &ModelParams,
    id_features: &[u32],
    semid: Option<&SemId>,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let spec = &params.spec;
    let ids = slot_rows(id_features, &spec.id_vocab, "id")?;
    let prefix = if spec.ablation.use_semid {
        let id = semid.ok_or_else(|| Error::Input("semantic id required when use_semid is on".into()))?;
        prefix_tokens(id, spec.esu.prefix_depth, spec.codebook_size)?
            .into_iter()
            .map(|t| params.prefix_vocab.row(t.key) as u32)
            .collect()
    } else {
        Vec::new()
    };
    Ok((ids, prefix))
}

/// Precomputed table rows for every corpus item, indexed by dense position.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    slots: usize,
    depth: usize,
    id_rows: Vec<u32>,
    prefix_rows: Vec<u32>,
}

impl FeatureTable {
    pub fn build(params: &ModelParams, corpus: &Corpus, semids: Option<&SemIdMap>) -> Result<Self> {
        let spec = &params.spec;
        let slots = spec.id_vocab.len();
        let depth = if spec.ablation.use_semid {
            spec.esu.prefix_depth
        } else {
            0
        };
        if spec.ablation.use_semid {
            let map = semids.ok_or_else(|| Error::Config("use_semid is on but no semantic ids were given".into()))?;
            let missing: Vec<u64> = corpus
                .items()
                .iter()
                .map(|r| r.item_id)
                .filter(|id| !map.contains_key(id))
                .collect();
            if !missing.is_empty() {
                return Err(Error::MissingSemId(missing));
            }
        }
        let mut id_rows = Vec::with_capacity(corpus.items().len() * slots);
        let mut prefix_rows = Vec::with_capacity(corpus.items().len() * depth);
        for r in corpus.items() {
            let semid = semids.and_then(|m| m.get(&r.item_id));
            let (ids, prefix) = item_rows(params, &r.id_features, semid)?;
            id_rows.extend(ids);
            prefix_rows.extend(prefix);
        }
        Ok(Self {
            slots,
            depth,
            id_rows,
            prefix_rows,
        })
    }

    pub fn len(&self) -> usize {
        if self.slots > 0 {
            self.id_rows.len() / self.slots
        } else {
            0
        }
    }

    pub fn is_empty(&self) -> bool {
        self.id_rows.is_empty()
    }

    #[inline]
    pub fn id_rows(&self, item: u32) -> &[u32] {
        let i = item as usize;
        &self.id_rows[i * self.slots..(i + 1) * self.slots]
    }

    #[inline]
    pub fn prefix_rows(&self, item: u32) -> &[u32] {
        let i = item as usize;
        &self.prefix_rows[i * self.depth..(i + 1) * self.depth]
    }
}

/// One model input, borrowed from an [`ExampleSet`].
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub user_id: u64,
    /// Dense position of the target item.
    pub target: u32,
    pub items: &'a [u32],
    pub buckets: &'a [u16],
    pub user_rows: &'a [u32],
    pub context_rows: &'a [u32],
    pub label: u8,
}

/// Impressions resolved to table rows and retrieved behaviors, stored flat.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExampleSet {
    offsets: Vec<usize>,
    items: Vec<u32>,
    buckets: Vec<u16>,
    targets: Vec<u32>,
    users: Vec<u64>,
    user_slots: usize,
    context_slots: usize,
    user_rows: Vec<u32>,
    context_rows: Vec<u32>,
    labels: Vec<u8>,
}

impl ExampleSet {
    /// `retrieved[n]` must come from impression `n` of `corpus`.
    pub fn build(params: &ModelParams, corpus: &Corpus, retrieved: &[RetrievedSequence]) -> Result<Self> {
        if retrieved.len() != corpus.impressions().len() {
            return Err(Error::Input(format!(
                "{} retrieved sequences for {} impressions",
                retrieved.len(),
                corpus.impressions().len()
            )));
        }
        let spec = &params.spec;
        let mut set = ExampleSet {
            offsets: vec![0],
            user_slots: spec.user_vocab.len(),
            context_slots: spec.context_vocab.len(),
            ..Default::default()
        };
        for (n, (imp, seq)) in corpus.impressions().iter().zip(retrieved).enumerate() {
            for e in &seq.events {
                if spec.ablation.use_simbucket && e.bucket >= spec.buckets {
                    return Err(Error::Input(format!(
                        "bucket {} outside {} buckets",
                        e.bucket, spec.buckets
                    )));
                }
                set.items.push(e.item);
                set.buckets
                    .push(u16::try_from(e.bucket).map_err(|_| Error::Input("bucket index too large".into()))?);
            }
            set.offsets.push(set.items.len());
            set.targets.push(corpus.target_index(n) as u32);
            set.users.push(imp.user_id);
            set.user_rows
                .extend(slot_rows(&imp.user_features, &spec.user_vocab, "user")?);
            set.context_rows
                .extend(slot_rows(&imp.context_features, &spec.context_vocab, "context")?);
            set.labels.push(imp.label);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn get(&self, n: usize) -> Example<'_> {
        let (a, b) = (self.offsets[n], self.offsets[n + 1]);
        Example {
            user_id: self.users[n],
            target: self.targets[n],
            items: &self.items[a..b],
            buckets: &self.buckets[a..b],
            user_rows: &self.user_rows[n * self.user_slots..(n + 1) * self.user_slots],
            context_rows: &self.context_rows[n * self.context_slots..(n + 1) * self.context_slots],
            label: self.labels[n],
        }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn users(&self) -> &[u64] {
        &self.users
    }
}
