//! Information-theoretic and CTR-dispersion analyses of labels, groupings and
//! learned representations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::esu::{forward_example, EsuConfig, ExampleSet, FeatureTable, ForwardCache, ModelParams};
use crate::experiment::{train_model, Prepared};
use crate::gsu::RetrievedSequence;
use crate::kmeans::{kmeans, DEFAULT_ITERATIONS};
use crate::quantizer::SemIdMap;
use crate::similarity::{bucketize, BucketConfig};
use crate::training::TrainConfig;

/// Contingency counts over (group, label).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteJoint {
    counts: Vec<Vec<u64>>,
}

impl DiscreteJoint {
    /// `counts[g][y]`; rows must share one length.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let width = counts.first().map_or(0, Vec::len);
        if counts.iter().any(|r| r.len() != width) {
            return Err(Error::Input("contingency rows differ in length".into()));
        }
        Ok(Self { counts })
    }

    /// Groups are ordered by key, labels by value.
    pub fn from_pairs(groups: &[u64], labels: &[u8]) -> Result<Self> {
        if groups.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} groups for {} labels",
                groups.len(),
                labels.len()
            )));
        }
        let n_labels = labels.iter().map(|&y| y as usize + 1).max().unwrap_or(1).max(2);
        let mut rows: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for (&g, &y) in groups.iter().zip(labels) {
            rows.entry(g).or_insert_with(|| vec![0; n_labels])[y as usize] += 1;
        }
        Ok(Self {
            counts: rows.into_values().collect(),
        })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn group_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn label_totals(&self) -> Vec<u64> {
        let width = self.counts.first().map_or(0, Vec::len);
        (0..width).map(|y| self.counts.iter().map(|r| r[y]).sum()).collect()
    }

    /// Joint probabilities `p(g, y)`.
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        let n = self.total() as f64;
        self.counts
            .iter()
            .map(|r| r.iter().map(|&c| c as f64 / n).collect())
            .collect()
    }
}

/// Shannon entropy in nats of a count vector; `0 ln 0 = 0`.
pub fn entropy(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Plug-in mutual information `sum p(g,y) ln[p(g,y) / (p(g) p(y))]` in nats.
pub fn mutual_information(joint: &DiscreteJoint) -> f64 {
    let n = joint.total() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let gt = joint.group_totals();
    let yt = joint.label_totals();
    let mut mi = 0.0;
    for (g, row) in joint.counts.iter().enumerate() {
        for (y, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (gt[g] as f64 * yt[y] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// `H(Y) - H(Y|G)`, computed from entropies rather than the joint ratio.
pub fn entropy_gain(joint: &DiscreteJoint) -> f64 {
    let n = joint.total() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let conditional: f64 = joint
        .counts
        .iter()
        .map(|row| row.iter().sum::<u64>() as f64 / n * entropy(row))
        .sum();
    entropy(&joint.label_totals()) - conditional
}

/// How impressions are grouped for information-gain analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Level-1 semantic id of the target.
    SemidLevel1,
    /// Similarity bucket of the best-matching retrieved behavior; impressions
    /// with nothing retrieved form their own group.
    SimBucket,
    Custom(Vec<u64>),
}

/// Group key of every impression of `corpus` under `grouping`.
pub fn impression_groups(
    corpus: &Corpus,
    retrieved: &[RetrievedSequence],
    semids: Option<&SemIdMap>,
    bucket: &BucketConfig,
    grouping: &Grouping,
) -> Result<Vec<u64>> {
    let imps = corpus.impressions();
    match grouping {
        Grouping::SemidLevel1 => {
            let ids = semids.ok_or_else(|| Error::Config("semid grouping needs semantic ids".into()))?;
            imps.iter()
                .map(|i| {
                    ids.get(&i.target_item_id)
                        .map(|s| s.top() as u64)
                        .ok_or_else(|| Error::MissingSemId(vec![i.target_item_id]))
                })
                .collect()
        }
        Grouping::SimBucket => {
            if retrieved.len() != imps.len() {
                return Err(Error::Input("one retrieved sequence per impression is required".into()));
            }
            Ok(retrieved
                .iter()
                .map(|r| {
                    r.max_similarity()
                        .map_or(bucket.buckets as u64, |s| bucketize(s, bucket) as u64)
                })
                .collect())
        }
        Grouping::Custom(keys) => {
            if keys.len() != imps.len() {
                return Err(Error::Input(format!(
                    "{} custom groups for {} impressions",
                    keys.len(),
                    imps.len()
                )));
            }
            Ok(keys.clone())
        }
    }
}

/// `I(Y; G)` of labels against a grouping, via `H(Y) - H(Y|G)`.
pub fn information_gain(groups: &[u64], labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Input("information gain needs at least one impression".into()));
    }
    Ok(entropy_gain(&DiscreteJoint::from_pairs(groups, labels)?))
}

/// MI of `groups` against `n` seeded permutations of `labels`.
pub fn permutation_null(groups: &[u64], labels: &[u8], n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = labels.to_vec();
    (0..n)
        .map(|_| {
            shuffled.shuffle(&mut rng);
            Ok(mutual_information(&DiscreteJoint::from_pairs(groups, &shuffled)?))
        })
        .collect()
}

/// Nearest-rank `q`-quantile (`q` in `[0, 1]`) of `values`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// k-means cluster assignments of `vectors` (all of one width).
pub fn cluster(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Input("vectors differ in width".into()));
    }
    let flat: Vec<f64> = vectors.iter().flatten().copied().collect();
    Ok(kmeans(&flat, dim, k, DEFAULT_ITERATIONS, seed)?.assignments)
}

/// The interest vector fed to the head (interest ⊙ target with target
/// interaction, the pooled interest without it)
/// of the first `limit` examples of `set`.
pub fn interest_vectors(
    params: &ModelParams,
    features: &FeatureTable,
    set: &ExampleSet,
    limit: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut cache = ForwardCache::default();
    (0..set.len().min(limit))
        .map(|n| {
            forward_example(params, features, &set.get(n), &mut cache)?;
            Ok(cache.interest(params).to_vec())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMi {
    pub clusters: usize,
    pub mi: f64,
}

/// `I(cluster(interest); label)` for each cluster count in `ks`.
pub fn mi_vs_clusters(
    params: &ModelParams,
    features: &FeatureTable,
    set: &ExampleSet,
    ks: &[usize],
    limit: usize,
    seed: u64,
) -> Result<Vec<ClusterMi>> {
    let reps = interest_vectors(params, features, set, limit)?;
    let labels = &set.labels()[..reps.len()];
    ks.iter()
        .map(|&k| {
            let groups: Vec<u64> = cluster(&reps, k, seed)?.into_iter().map(|c| c as u64).collect();
            Ok(ClusterMi {
                clusters: k,
                mi: mutual_information(&DiscreteJoint::from_pairs(&groups, labels)?),
            })
        })
        .collect()
}

/// How similarities are binned for the dispersion table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binning {
    /// The model's calibrated buckets.
    Model,
    /// Fixed-width bins over `[-1, 1]`.
    Width { width: f64 },
}

impl Binning {
    fn bin(&self, s: f64, bucket: &BucketConfig) -> (usize, f64, f64) {
        match *self {
            Binning::Model => {
                let q = bucketize(s, bucket);
                let r = bucket.range;
                let step = (r.s_max - r.s_min) / bucket.buckets as f64;
                (q, r.s_min + q as f64 * step, r.s_min + (q + 1) as f64 * step)
            }
            Binning::Width { width } => {
                let n = (2.0 / width).ceil() as usize;
                let q = (((s + 1.0) / width).floor().max(0.0) as usize).min(n - 1);
                (q, -1.0 + q as f64 * width, (-1.0 + (q + 1) as f64 * width).min(1.0))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispersionConfig {
    pub min_support: u64,
    pub binning: Binning,
}

impl Default for DispersionConfig {
    fn default() -> Self {
        Self {
            min_support: 50,
            binning: Binning::Width { width: 0.1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionCell {
    pub bin: usize,
    pub group: u64,
    pub count: u64,
    pub clicks: u64,
    pub ctr: f64,
}

/// CTR spread across groups inside one similarity bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpread {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub groups: usize,
    pub ctr_min: f64,
    pub ctr_max: f64,
    /// Population standard deviation of group CTRs.
    pub ctr_std: f64,
    /// Standard deviation expected from binomial sampling alone if every
    /// group shared the bin's pooled CTR.
    pub binomial_std: f64,
    /// Pearson statistic of the homogeneity test and its degrees of freedom.
    pub chi2: f64,
    pub dof: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    /// Cells meeting the minimum support.
    pub cells: Vec<DispersionCell>,
    /// Bins with at least one supported cell.
    pub bins: Vec<BinSpread>,
    pub excluded_cells: usize,
    /// Impressions without any retrieved behavior.
    pub unmatched: usize,
    pub diagnostic: Option<String>,
}

impl DispersionReport {
    /// Pooled homogeneity test over all bins with at least two groups.
    pub fn pooled_p_value(&self) -> Option<f64> {
        let (chi2, dof) = self
            .bins
            .iter()
            .filter(|b| b.dof > 0)
            .fold((0.0, 0usize), |(c, d), b| (c + b.chi2, d + b.dof));
        if dof == 0 {
            return None;
        }
        Some(1.0 - ChiSquared::new(dof as f64).ok()?.cdf(chi2))
    }

    /// Bins as rows, groups as columns, CTR per cell (`-` when unsupported).
    pub fn table(&self) -> String {
        let mut groups: Vec<u64> = self.cells.iter().map(|c| c.group).collect();
        groups.sort_unstable();
        groups.dedup();
        let mut out = String::from("bin\trange");
        for g in &groups {
            let _ = write!(out, "\tg{g}");
        }
        out.push_str("\tmin\tmax\tstd\n");
        for b in &self.bins {
            let _ = write!(out, "{}\t[{:.3},{:.3})", b.bin, b.lo, b.hi);
            for g in &groups {
                match self.cells.iter().find(|c| c.bin == b.bin && c.group == *g) {
                    Some(c) => {
                        let _ = write!(out, "\t{:.3}", c.ctr);
                    }
                    None => out.push_str("\t-"),
                }
            }
            let _ = writeln!(out, "\t{:.3}\t{:.3}\t{:.4}", b.ctr_min, b.ctr_max, b.ctr_std);
        }
        out
    }
}

/// Per-bin CTR spread across groups. `max_similarity[n]` is the best
/// behavior-target similarity of impression `n` (`None` if nothing was
/// retrieved).
pub fn within_bucket_dispersion(
    max_similarity: &[Option<f64>],
    groups: &[u64],
    labels: &[u8],
    bucket: &BucketConfig,
    cfg: &DispersionConfig,
) -> Result<DispersionReport> {
    if max_similarity.len() != labels.len() || groups.len() != labels.len() {
        return Err(Error::Input("similarities, groups and labels differ in length".into()));
    }
    let mut tally: BTreeMap<(usize, u64), (u64, u64)> = BTreeMap::new();
    let mut ranges: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    let mut unmatched = 0;
    for ((s, &g), &y) in max_similarity.iter().zip(groups).zip(labels) {
        let Some(s) = *s else {
            unmatched += 1;
            continue;
        };
        let (bin, lo, hi) = cfg.binning.bin(s, bucket);
        ranges.insert(bin, (lo, hi));
        let t = tally.entry((bin, g)).or_default();
        t.0 += 1;
        t.1 += y as u64;
    }
    let mut cells = Vec::new();
    let mut excluded = 0;
    for (&(bin, group), &(count, clicks)) in &tally {
        if count >= cfg.min_support {
            cells.push(DispersionCell {
                bin,
                group,
                count,
                clicks,
                ctr: clicks as f64 / count as f64,
            });
        } else {
            excluded += 1;
        }
    }
    let mut bins = Vec::new();
    for (&bin, &(lo, hi)) in &ranges {
        let cs: Vec<&DispersionCell> = cells.iter().filter(|c| c.bin == bin).collect();
        if cs.is_empty() {
            continue;
        }
        let g = cs.len() as f64;
        let mean = cs.iter().map(|c| c.ctr).sum::<f64>() / g;
        let var = cs.iter().map(|c| (c.ctr - mean).powi(2)).sum::<f64>() / g;
        let n: u64 = cs.iter().map(|c| c.count).sum();
        let pooled = cs.iter().map(|c| c.clicks).sum::<u64>() as f64 / n as f64;
        let pq = pooled * (1.0 - pooled);
        let inv_n_mean = cs.iter().map(|c| 1.0 / c.count as f64).sum::<f64>() / g;
        let chi2 = if pq > 0.0 {
            cs.iter()
                .map(|c| (c.clicks as f64 - c.count as f64 * pooled).powi(2) / (c.count as f64 * pq))
                .sum()
        } else {
            0.0
        };
        bins.push(BinSpread {
            bin,
            lo,
            hi,
            groups: cs.len(),
            ctr_min: cs.iter().map(|c| c.ctr).fold(f64::INFINITY, f64::min),
            ctr_max: cs.iter().map(|c| c.ctr).fold(f64::NEG_INFINITY, f64::max),
            ctr_std: var.sqrt(),
            // E[population variance of G group means] = (G-1)/G * mean(pq/n_g).
            binomial_std: ((g - 1.0) / g * pq * inv_n_mean).sqrt(),
            chi2,
            dof: if pq > 0.0 { cs.len() - 1 } else { 0 },
        });
    }
    let diagnostic = cells
        .is_empty()
        .then(|| format!("no (bin, group) cell reaches min_support = {}", cfg.min_support));
    Ok(DispersionReport {
        cells,
        bins,
        excluded_cells: excluded,
        unmatched,
        diagnostic,
    })
}

/// Dispersion of the eval side of `data`, pairing each impression's best
/// retrieved similarity with its target's level-1 semantic id.
pub fn dispersion_for(data: &Prepared, cfg: &DispersionConfig) -> Result<DispersionReport> {
    let groups = impression_groups(
        &data.eval,
        &data.eval_retrieved,
        data.semids.as_ref(),
        &data.bucket,
        &Grouping::SemidLevel1,
    )?;
    let sims: Vec<Option<f64>> = data
        .eval_retrieved
        .iter()
        .map(RetrievedSequence::max_similarity)
        .collect();
    let labels: Vec<u8> = data.eval.impressions().iter().map(|i| i.label).collect();
    within_bucket_dispersion(&sims, &groups, &labels, &data.bucket, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub buckets: usize,
    pub eval_gauc: f64,
}

/// Trains one model per bucket count on the same data and seed.
pub fn bucket_sweep(
    data: &Prepared,
    bucket_counts: &[usize],
    esu: &EsuConfig,
    tcfg: &TrainConfig,
) -> Result<Vec<SweepPoint>> {
    bucket_counts
        .iter()
        .map(|&b| {
            let run = train_model(&data.with_buckets(b)?, esu, tcfg)?;
            Ok(SweepPoint {
                buckets: b,
                eval_gauc: run.eval_gauc,
            })
        })
        .collect()
}
