//! Seeded Lloyd k-means with k-means++ initialization.
//!
//! Shared by codebook training and the representation analyses. Ties are
//! always resolved toward the lowest index so results depend only on the
//! data and the seed.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_ITERATIONS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Mean over points of the squared distance to the assigned centroid.
    pub mse: f64,
}

impl KMeans {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its squared distance.
pub(crate) fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn count_distinct(data: &[f64], dim: usize, stop_at: usize) -> usize {
    let mut seen = HashSet::new();
    for row in data.chunks_exact(dim) {
        let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
        seen.insert(key);
        if seen.len() >= stop_at {
            break;
        }
    }
    seen.len()
}

/// Clusters the rows of `data` (row-major, `dim` columns) into `k` groups.
pub fn kmeans(data: &[f64], dim: usize, k: usize, iterations: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::Input(format!(
            "data length {} is not a multiple of dim {dim}",
            data.len()
        )));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("k-means input contains non-finite values".into()));
    }
    let n = data.len() / dim;
    let distinct = count_distinct(data, dim, k);
    if distinct < k {
        return Err(Error::Degenerate(format!(
            "{distinct} distinct points cannot form {k} clusters"
        )));
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let threshold = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            if acc > threshold {
                pick = Some(i);
                break;
            }
        }
        // Rounding can leave `acc` just short of `threshold`; fall back to the
        // last point with positive weight.
        let pick = pick
            .or_else(|| d2.iter().rposition(|&w| w > 0.0))
            .expect("distinct points remain");
        centroids.extend_from_slice(row(pick));
        let cent = &centroids[c * dim..];
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(row(i), cent));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for _ in 0..iterations {
        for (i, a) in assignments.iter_mut().enumerate() {
            *a = nearest(row(i), &centroids, dim).0;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] * inv;
                }
            }
        }
        repair_empty(data, dim, &mut centroids, &mut assignments, &mut counts);
    }

    let mut total = 0.0;
    for (i, a) in assignments.iter_mut().enumerate() {
        let (c, d) = nearest(row(i), &centroids, dim);
        *a = c;
        total += d;
    }
    Ok(KMeans {
        k,
        dim,
        centroids,
        assignments,
        mse: total / n as f64,
    })
}

/// Re-seeds each empty cluster with the point of the largest cluster that is
/// farthest from its centroid, then recomputes the donor's centroid.
fn repair_empty(data: &[f64], dim: usize, centroids: &mut [f64], assignments: &mut [usize], counts: &mut [usize]) {
    let k = counts.len();
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut donor = 0;
        for c in 1..k {
            if counts[c] > counts[donor] {
                donor = c;
            }
        }
        if counts[donor] < 2 {
            return;
        }
        let dc = centroids[donor * dim..(donor + 1) * dim].to_vec();
        let mut far = (usize::MAX, f64::NEG_INFINITY);
        for (i, &a) in assignments.iter().enumerate() {
            if a == donor {
                let d = sq_dist(&data[i * dim..(i + 1) * dim], &dc);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        let p = far.0;
        assignments[p] = empty;
        counts[empty] = 1;
        counts[donor] -= 1;
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(&data[p * dim..(p + 1) * dim]);

        let mut mean = vec![0.0; dim];
        for (i, &a) in assignments.iter().enumerate() {
            if a == donor {
                for (m, v) in mean.iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
                    *m += v;
                }
            }
        }
        let inv = 1.0 / counts[donor] as f64;
        for (j, m) in mean.into_iter().enumerate() {
            centroids[donor * dim + j] = m * inv;
        }
    }
}
