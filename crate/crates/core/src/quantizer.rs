//! Residual quantization of item embeddings into hierarchical semantic IDs
//! and their prefix-token encoding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ItemRecord;
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, nearest, DEFAULT_ITERATIONS};
use crate::tensor::Tensor;

const CODEBOOK_MAGIC: &[u8; 4] = b"SMCB";
const CODEBOOK_VERSION: u32 = 1;

/// Hierarchical code tuple `(c1, ..., cM)`, coarse to fine.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemId(pub Vec<u32>);

impl SemId {
    pub fn levels(&self) -> usize {
        self.0.len()
    }

    /// Top-level code, the key used by hard retrieval.
    pub fn top(&self) -> u32 {
        self.0[0]
    }
}

/// Semantic IDs by item id.
pub type SemIdMap = BTreeMap<u64, SemId>;

/// Per-level residual codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub codebook_size: usize,
    pub dim: usize,
    /// One `codebook_size x dim` row-major block per level.
    pub levels: Vec<Vec<f32>>,
    /// Mean squared residual norm after quantizing with levels `0..=m`.
    pub level_mse: Vec<f64>,
}

/// Fits `levels` codebooks of `codebook_size` centroids each. Level `m` is
/// k-means over the residuals left by levels `0..m`.
pub fn train_codebooks(items: &[ItemRecord], levels: usize, codebook_size: usize, seed: u64) -> Result<Codebooks> {
    if levels == 0 {
        return Err(Error::Config("at least one quantization level is required".into()));
    }
    if codebook_size == 0 {
        return Err(Error::Config("codebook size must be positive".into()));
    }
    let dim = items.first().map(|i| i.mm_embedding.len()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::Degenerate("no items to train codebooks on".into()));
    }
    let mut residual = Vec::with_capacity(items.len() * dim);
    for it in items {
        if it.mm_embedding.len() != dim {
            return Err(Error::Input(format!("item {} has inconsistent dimension", it.item_id)));
        }
        if it.mm_embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("item {} has a non-finite embedding", it.item_id)));
        }
        residual.extend(it.mm_embedding.iter().map(|&v| v as f64));
    }
    let n = items.len();

    let mut books = Vec::with_capacity(levels);
    let mut level_mse = Vec::with_capacity(levels);
    for m in 0..levels {
        let km = kmeans(
            &residual,
            dim,
            codebook_size,
            DEFAULT_ITERATIONS,
            seed.wrapping_add(m as u64),
        )?;
        let book: Vec<f32> = km.centroids.iter().map(|&c| c as f32).collect();
        let book64: Vec<f64> = book.iter().map(|&c| c as f64).collect();
        let mut total = 0.0;
        for r in residual.chunks_exact_mut(dim) {
            let (c, _) = nearest(r, &book64, dim);
            for (x, y) in r.iter_mut().zip(&book64[c * dim..(c + 1) * dim]) {
                *x -= y;
            }
            total += r.iter().map(|x| x * x).sum::<f64>();
        }
        level_mse.push(total / n as f64);
        books.push(book);
    }
    Ok(Codebooks {
        codebook_size,
        dim,
        levels: books,
        level_mse,
    })
}

impl Codebooks {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Greedy residual assignment, lowest centroid index on ties.
    pub fn encode(&self, embedding: &[f32]) -> Result<SemId> {
        if embedding.len() != self.dim {
            return Err(Error::Input(format!(
                "embedding dimension {} does not match codebook dimension {}",
                embedding.len(),
                self.dim
            )));
        }
        let mut residual: Vec<f64> = embedding.iter().map(|&v| v as f64).collect();
        let mut codes = Vec::with_capacity(self.levels.len());
        let mut cent = vec![0.0; self.dim];
        for book in &self.levels {
            let mut best = (0usize, f64::INFINITY);
            for (c, row) in book.chunks_exact(self.dim).enumerate() {
                let d: f64 = residual.iter().zip(row).map(|(r, &x)| (r - x as f64).powi(2)).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            for (j, x) in book[best.0 * self.dim..(best.0 + 1) * self.dim].iter().enumerate() {
                cent[j] = *x as f64;
            }
            for (r, c) in residual.iter_mut().zip(&cent) {
                *r -= c;
            }
            codes.push(best.0 as u32);
        }
        Ok(SemId(codes))
    }

    /// Sum of the selected centroids.
    pub fn reconstruct(&self, id: &SemId) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (book, &c) in self.levels.iter().zip(&id.0) {
            let c = c as usize;
            for (o, &x) in out.iter_mut().zip(&book[c * self.dim..(c + 1) * self.dim]) {
                *o += x as f64;
            }
        }
        out
    }

    pub fn encode_items(&self, items: &[ItemRecord]) -> Result<SemIdMap> {
        items
            .iter()
            .map(|it| Ok((it.item_id, self.encode(&it.mm_embedding)?)))
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        for v in [
            CODEBOOK_VERSION,
            self.levels.len() as u32,
            self.codebook_size as u32,
            self.dim as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for book in &self.levels {
            for x in book {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for e in &self.level_mse {
            w.write_all(&e.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::Schema("not a codebook file".into()));
        }
        let mut u = [0u32; 4];
        for v in u.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let [version, m, c, d] = u;
        if version != CODEBOOK_VERSION {
            return Err(Error::Schema(format!("unsupported codebook version {version}")));
        }
        let (m, c, d) = (m as usize, c as usize, d as usize);
        let mut levels = Vec::with_capacity(m);
        for _ in 0..m {
            let mut bytes = vec![0u8; c * d * 4];
            r.read_exact(&mut bytes)?;
            levels.push(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            );
        }
        let mut level_mse = Vec::with_capacity(m);
        for _ in 0..m {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            level_mse.push(f64::from_le_bytes(b));
        }
        Ok(Self {
            codebook_size: c,
            dim: d,
            levels,
            level_mse,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SemIdLine {
    item_id: u64,
    codes: Vec<u32>,
}

/// Writes `{item_id, codes}` lines in item-id order.
pub fn save_semids(map: &SemIdMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (&item_id, id) in map {
        serde_json::to_writer(
            &mut w,
            &SemIdLine {
                item_id,
                codes: id.0.clone(),
            },
        )
        .map_err(|e| Error::Internal(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_semids(path: &Path) -> Result<SemIdMap> {
    let mut map = SemIdMap::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: SemIdLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        map.insert(row.item_id, SemId(row.codes));
    }
    Ok(map)
}

/// A code prefix `(c1..ck)` packed into one lookup key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PrefixToken {
    pub depth: usize,
    pub key: u64,
}

/// Mixed-radix packing offset by the number of shorter prefixes, so keys are
/// unique across depths: depth-`k` keys occupy
/// `[sum_{j<k} C^j, sum_{j<=k} C^j)` (with `j` starting at 1).
pub fn pack_prefix(codes: &[u32], codebook_size: usize) -> Result<u64> {
    let c = codebook_size as u64;
    let overflow = || {
        Error::Config(format!(
            "prefix of depth {} does not fit a 64-bit key with C={codebook_size}",
            codes.len()
        ))
    };
    let mut offset = 0u64;
    let mut width = 1u64;
    for _ in 1..codes.len() {
        width = width.checked_mul(c).ok_or_else(overflow)?;
        offset = offset.checked_add(width).ok_or_else(overflow)?;
    }
    let mut value = 0u64;
    for &code in codes {
        if code as u64 >= c {
            return Err(Error::Input(format!(
                "code {code} outside codebook of size {codebook_size}"
            )));
        }
        value = value
            .checked_mul(c)
            .and_then(|v| v.checked_add(code as u64))
            .ok_or_else(overflow)?;
    }
    offset.checked_add(value).ok_or_else(overflow)
}

/// The `depth` nested prefixes of `id`, shortest first.
pub fn prefix_tokens(id: &SemId, depth: usize, codebook_size: usize) -> Result<Vec<PrefixToken>> {
    if depth == 0 || depth > id.levels() {
        return Err(Error::Config(format!(
            "prefix depth {depth} must be in 1..={}",
            id.levels()
        )));
    }
    (1..=depth)
        .map(|k| {
            Ok(PrefixToken {
                depth: k,
                key: pack_prefix(&id.0[..k], codebook_size)?,
            })
        })
        .collect()
}

/// Maps packed prefix keys to rows of the shared prefix table. Row 0 is the
/// out-of-vocabulary row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrefixVocab {
    rows: BTreeMap<u64, usize>,
}

impl PrefixVocab {
    pub const OOV_ROW: usize = 0;

    /// Collects every prefix key of `ids`; rows are assigned in key order.
    pub fn build<'a>(ids: impl IntoIterator<Item = &'a SemId>, depth: usize, codebook_size: usize) -> Result<Self> {
        let mut keys = std::collections::BTreeSet::new();
        for id in ids {
            for t in prefix_tokens(id, depth, codebook_size)? {
                keys.insert(t.key);
            }
        }
        Ok(Self::from_keys(keys))
    }

    pub fn from_keys(keys: impl IntoIterator<Item = u64>) -> Self {
        let mut sorted: Vec<u64> = keys.into_iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        Self {
            rows: sorted.into_iter().enumerate().map(|(i, k)| (k, i + 1)).collect(),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.rows.keys().copied()
    }

    /// Table rows needed, including the OOV row.
    pub fn num_rows(&self) -> usize {
        self.rows.len() + 1
    }

    pub fn row(&self, key: u64) -> usize {
        self.rows.get(&key).copied().unwrap_or(Self::OOV_ROW)
    }
}

/// Concatenation of the prefix-table rows of `tokens` (width `tokens.len() * table.cols`).
pub fn semantic_embedding(table: &Tensor, vocab: &PrefixVocab, tokens: &[PrefixToken]) -> Vec<f64> {
    let mut out = Vec::with_capacity(tokens.len() * table.cols);
    for t in tokens {
        out.extend_from_slice(table.row(vocab.row(t.key)));
    }
    out
}
