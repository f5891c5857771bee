//! Cosine similarity, similarity-range calibration and bucketization.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{l2_norm, Corpus};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static ZERO_NORM: AtomicU64 = AtomicU64::new(0);

/// Number of cosine evaluations that hit a zero-norm vector since process start.
pub fn zero_norm_count() -> u64 {
    ZERO_NORM.load(Ordering::Relaxed)
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0f64; 4];
    let split = a.len() - a.len() % 4;
    for (x, y) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] as f64 * y[k] as f64;
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        s += *x as f64 * *y as f64;
    }
    s
}

/// Cosine given precomputed norms. Zero norms yield 0 and bump the diagnostic counter.
#[inline]
pub fn cosine_with_norms(a: &[f32], norm_a: f64, b: &[f32], norm_b: f64) -> f64 {
    if norm_a == 0.0 || norm_b == 0.0 {
        ZERO_NORM.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    (dot(a, b) / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// `a.b / (|a||b|)` clamped to `[-1, 1]`.
///
/// Panics if the lengths differ.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different dimension");
    cosine_with_norms(a, l2_norm(a), b, l2_norm(b))
}

/// Effective similarity range `[s_min, s_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimRange {
    pub s_min: f64,
    pub s_max: f64,
    pub sample_size: usize,
    /// Set when the sample had zero spread and the range was widened.
    #[serde(default)]
    pub degenerate: bool,
}

impl SimRange {
    pub fn new(s_min: f64, s_max: f64) -> Result<Self> {
        let r = Self {
            s_min,
            s_max,
            sample_size: 0,
            degenerate: false,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_min < self.s_max) || self.s_min < -1.0 || self.s_max > 1.0 {
            return Err(Error::Config(format!(
                "similarity range [{}, {}] must satisfy -1 <= s_min < s_max <= 1",
                self.s_min, self.s_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketConfig {
    pub buckets: usize,
    pub range: SimRange,
}

impl BucketConfig {
    pub fn new(buckets: usize, range: SimRange) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::Config("bucket count must be at least 1".into()));
        }
        range.validate()?;
        Ok(Self { buckets, range })
    }
}

const WIDEN: f64 = 1e-6;

/// Linear-interpolation percentile of sorted data, `pct` in `[0, 100]`.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Samples (visible behavior, target) pairs uniformly over all such pairs of
/// the corpus impressions and returns the `(lo_pct, hi_pct)` percentiles of
/// their cosine similarities.
pub fn calibrate_range(corpus: &Corpus, sample_size: usize, lo_pct: f64, hi_pct: f64, seed: u64) -> Result<SimRange> {
    if sample_size < 2 {
        return Err(Error::Config("calibration sample size must be at least 2".into()));
    }
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct > hi_pct {
        return Err(Error::Config(format!("invalid percentiles ({lo_pct}, {hi_pct})")));
    }
    if corpus.impressions().is_empty() {
        return Err(Error::Calibration("no impressions to calibrate on".into()));
    }
    // Cumulative visible-pair counts; an impression is drawn with probability
    // proportional to its visible history length.
    let mut cumulative = Vec::with_capacity(corpus.impressions().len());
    let mut total = 0u64;
    for n in 0..corpus.impressions().len() {
        total += corpus.visible_history(n).len() as u64;
        cumulative.push(total);
    }
    if total == 0 {
        return Err(Error::Calibration("no impression has a visible behavior".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sims = Vec::with_capacity(sample_size);
    for _ in 0..sample_size {
        let pair = rng.random_range(0..total);
        let n = cumulative.partition_point(|&c| c <= pair);
        let offset = pair - if n == 0 { 0 } else { cumulative[n - 1] };
        let h = corpus.visible_history(n);
        let b = h.items[offset as usize] as usize;
        let t = corpus.target_index(n);
        sims.push(cosine_with_norms(
            corpus.embedding(b),
            corpus.norm(b),
            corpus.embedding(t),
            corpus.norm(t),
        ));
    }
    sims.sort_by(f64::total_cmp);
    let mut s_min = percentile(&sims, lo_pct);
    let mut s_max = percentile(&sims, hi_pct);
    let mut degenerate = false;
    if s_max - s_min <= 0.0 {
        degenerate = true;
        s_min = (s_min - WIDEN).max(-1.0);
        s_max = (s_max + WIDEN).min(1.0);
        if s_min >= s_max {
            s_min = s_max - 2.0 * WIDEN;
        }
    }
    Ok(SimRange {
        s_min,
        s_max,
        sample_size,
        degenerate,
    })
}

/// `floor((s - s_min) / (s_max - s_min) * B)` clipped to `[0, B-1]`. NaN maps to 0.
#[inline]
pub fn bucketize(s: f64, cfg: &BucketConfig) -> usize {
    let r = &cfg.range;
    let q = ((s - r.s_min) / (r.s_max - r.s_min) * cfg.buckets as f64).floor();
    if q.is_nan() || q < 0.0 {
        0
    } else {
        (q as usize).min(cfg.buckets - 1)
    }
}

/// Row `q` of the bucket table.
pub fn bucket_embedding(table: &Tensor, q: usize) -> &[f64] {
    assert!(q < table.rows, "bucket {q} outside a table of {} rows", table.rows);
    table.row(q)
}
