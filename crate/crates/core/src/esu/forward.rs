use super::features::{item_rows, slot_rows, Example, FeatureTable};
use super::params::ModelParams;
use crate::data::{Corpus, ItemRecord};
use crate::error::{Error, Result};
use crate::gsu::RetrievedSequence;
use crate::quantizer::{SemId, SemIdMap};

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Writes `h = concat(id rows, prefix rows)` into `out` (width `D`).
pub(crate) fn write_unified(params: &ModelParams, ids: &[u32], prefix: &[u32], out: &mut [f64]) {
    let mut at = 0;
    for (slot, &row) in ids.iter().enumerate() {
        let t = &params.tensors[params.layout.id[slot]];
        out[at..at + t.cols].copy_from_slice(t.row(row as usize));
        at += t.cols;
    }
    if let Some(p) = params.layout.prefix {
        let t = &params.tensors[p];
        for &row in prefix {
            out[at..at + t.cols].copy_from_slice(t.row(row as usize));
            at += t.cols;
        }
    }
    debug_assert_eq!(at, out.len());
}

/// Activations of one forward pass, kept for the backward pass. Buffers are
/// reused across calls.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pub(crate) len: usize,
    pub(crate) target_ids: Vec<u32>,
    pub(crate) target_prefix: Vec<u32>,
    pub(crate) ids: Vec<u32>,
    pub(crate) prefix: Vec<u32>,
    pub(crate) buckets: Vec<u16>,
    pub(crate) user_rows: Vec<u32>,
    pub(crate) context_rows: Vec<u32>,
    /// Attention inputs `h_i (+) e_sim(bucket_i)`, `len x attention width`.
    pub(crate) x: Vec<f64>,
    /// `h_t (+) e_t_sim`.
    pub(crate) x_t: Vec<f64>,
    pub(crate) q: Vec<f64>,
    /// Per head, `W_k^T q / sqrt(head_dim)`.
    pub(crate) kq: Vec<f64>,
    /// Per-head softmax weights, `heads x len`.
    pub(crate) probs: Vec<f64>,
    pub alpha: Vec<f64>,
    pub u: Vec<f64>,
    /// `acts[0]` is the MLP input, `acts[l]` the output of hidden layer `l-1`.
    pub(crate) acts: Vec<Vec<f64>>,
    pub logit: f64,
    pub prob: f64,
}

impl ForwardCache {
    /// Number of retrieved behaviors.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `h_t`.
    pub fn target(&self, params: &ModelParams) -> &[f64] {
        &self.x_t[..params.spec.item_width()]
    }

    /// The representation handed to the prediction head: `u ⊙ h_t` with target
    /// interaction, `u` without.
    pub fn interest(&self, params: &ModelParams) -> &[f64] {
        &self.acts[0][..params.spec.item_width()]
    }

    fn load(&mut self, ft: &FeatureTable, ex: &Example<'_>) {
        self.len = ex.items.len();
        self.target_ids.clear();
        self.target_ids.extend_from_slice(ft.id_rows(ex.target));
        self.target_prefix.clear();
        self.target_prefix.extend_from_slice(ft.prefix_rows(ex.target));
        self.ids.clear();
        self.prefix.clear();
        for &it in ex.items {
            self.ids.extend_from_slice(ft.id_rows(it));
            self.prefix.extend_from_slice(ft.prefix_rows(it));
        }
        self.buckets.clear();
        self.buckets.extend_from_slice(ex.buckets);
        self.user_rows.clear();
        self.user_rows.extend_from_slice(ex.user_rows);
        self.context_rows.clear();
        self.context_rows.extend_from_slice(ex.context_rows);
    }

    pub(crate) fn check(&self, params: &ModelParams) -> Result<()> {
        let s = &params.spec;
        let ok = self.x_t.len() == s.attention_width()
            && self.x.len() == self.len * s.attention_width()
            && self.ids.len() == self.len * s.id_vocab.len()
            && self.prefix.len() == self.len * if s.ablation.use_semid { s.esu.prefix_depth } else { 0 }
            && self.acts.len() == params.layout.mlp.len()
            && self.acts[0].len() == s.mlp_input_width();
        if ok {
            Ok(())
        } else {
            Err(Error::Internal("forward cache does not match parameter shapes".into()))
        }
    }

    fn run(&mut self, params: &ModelParams) -> Result<f64> {
        let s = &params.spec;
        let d = s.item_width();
        let aw = s.attention_width();
        let slots = s.id_vocab.len();
        let depth = if s.ablation.use_semid { s.esu.prefix_depth } else { 0 };
        let l = self.len;

        self.x_t.resize(aw, 0.0);
        write_unified(params, &self.target_ids, &self.target_prefix, &mut self.x_t[..d]);
        if let Some(ts) = params.layout.target_sim {
            self.x_t[d..].copy_from_slice(&params.tensors[ts].data);
        }
        self.x.resize(l * aw, 0.0);
        for i in 0..l {
            let row = &mut self.x[i * aw..(i + 1) * aw];
            write_unified(
                params,
                &self.ids[i * slots..(i + 1) * slots],
                &self.prefix[i * depth..(i + 1) * depth],
                &mut row[..d],
            );
            if let Some(b) = params.layout.bucket {
                row[d..].copy_from_slice(params.tensors[b].row(self.buckets[i] as usize));
            }
        }
        attend(
            params,
            &self.x_t,
            &self.x,
            l,
            &mut self.q,
            &mut self.kq,
            &mut self.probs,
            &mut self.alpha,
            &mut self.u,
        );

        self.acts.resize(params.layout.mlp.len(), Vec::new());
        let input = &mut self.acts[0];
        input.clear();
        if s.ablation.use_target_interaction {
            input.extend(self.u.iter().zip(&self.x_t[..d]).map(|(a, b)| a * b));
        } else {
            input.extend_from_slice(&self.u);
        }
        input.extend_from_slice(&self.x_t[..d]);
        push_categorical(params, &self.user_rows, &self.context_rows, input);
        self.logit = mlp(params, &mut self.acts)?;
        self.prob = sigmoid(self.logit);
        Ok(self.prob)
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn push_categorical(params: &ModelParams, user_rows: &[u32], context_rows: &[u32], out: &mut Vec<f64>) {
    for (slot, &r) in user_rows.iter().enumerate() {
        out.extend_from_slice(params.tensors[params.layout.user[slot]].row(r as usize));
    }
    for (slot, &r) in context_rows.iter().enumerate() {
        out.extend_from_slice(params.tensors[params.layout.context[slot]].row(r as usize));
    }
}

/// Multi-head scaled dot-product attention with head-averaged weights.
/// Values are the first `D` columns of each row of `x`.
#[allow(clippy::too_many_arguments)]
fn attend(
    params: &ModelParams,
    x_t: &[f64],
    x: &[f64],
    l: usize,
    q: &mut Vec<f64>,
    kq: &mut Vec<f64>,
    probs: &mut Vec<f64>,
    alpha: &mut Vec<f64>,
    u: &mut Vec<f64>,
) {
    let s = &params.spec;
    let (heads, dh) = (s.esu.heads, s.esu.head_dim);
    let d = s.item_width();
    let aw = s.attention_width();
    let wq = &params.tensors[params.layout.wq];
    let wk = &params.tensors[params.layout.wk];
    let scale = 1.0 / (dh as f64).sqrt();

    q.clear();
    q.extend((0..heads * dh).map(|r| dot(wq.row(r), x_t)));
    kq.clear();
    kq.resize(heads * aw, 0.0);
    for r in 0..heads * dh {
        let a = r / dh;
        axpy(q[r] * scale, wk.row(r), &mut kq[a * aw..(a + 1) * aw]);
    }
    probs.clear();
    probs.resize(heads * l, 0.0);
    alpha.clear();
    alpha.resize(l, 0.0);
    for a in 0..heads {
        let k = &kq[a * aw..(a + 1) * aw];
        let p = &mut probs[a * l..(a + 1) * l];
        for (i, pi) in p.iter_mut().enumerate() {
            *pi = dot(&x[i * aw..(i + 1) * aw], k);
        }
        let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for pi in p.iter_mut() {
            *pi = (*pi - m).exp();
            z += *pi;
        }
        for (pi, ai) in p.iter_mut().zip(alpha.iter_mut()) {
            *pi /= z;
            *ai += *pi / heads as f64;
        }
    }
    u.clear();
    u.resize(d, 0.0);
    for i in 0..l {
        axpy(alpha[i], &x[i * aw..i * aw + d], u);
    }
}

/// Runs the MLP on `acts[0]`, filling the hidden activations; returns the logit.
fn mlp(params: &ModelParams, acts: &mut [Vec<f64>]) -> Result<f64> {
    let layers = &params.layout.mlp;
    let mut logit = 0.0;
    for (l, &(wi, bi)) in layers.iter().enumerate() {
        let w = &params.tensors[wi];
        let b = &params.tensors[bi].data;
        let (input, rest) = acts.split_at_mut(l + 1);
        let input = &input[l];
        if l + 1 == layers.len() {
            logit = dot(w.row(0), input) + b[0];
            if !logit.is_finite() {
                return Err(Error::Numeric {
                    layer: l,
                    msg: format!("non-finite logit {logit}"),
                });
            }
        } else {
            let out = &mut rest[0];
            out.clear();
            out.extend((0..w.rows).map(|r| (dot(w.row(r), input) + b[r]).max(0.0)));
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: l,
                    msg: "non-finite hidden activation".into(),
                });
            }
        }
    }
    Ok(logit)
}

/// Forward pass over precomputed rows; `cache` is overwritten.
pub fn forward_example(
    params: &ModelParams,
    ft: &FeatureTable,
    ex: &Example<'_>,
    cache: &mut ForwardCache,
) -> Result<f64> {
    cache.load(ft, ex);
    cache.run(params)
}

/// The unified representation `h` of one item.
pub fn unify(params: &ModelParams, item: &ItemRecord, semid: Option<&SemId>) -> Result<Vec<f64>> {
    let (ids, prefix) = item_rows(params, &item.id_features, semid)?;
    let mut h = vec![0.0; params.spec.item_width()];
    write_unified(params, &ids, &prefix, &mut h);
    Ok(h)
}

/// Interest vector `u` and head-averaged attention weights over `behaviors`.
pub fn target_attention(
    params: &ModelParams,
    behaviors: &[Vec<f64>],
    buckets: &[usize],
    target: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = &params.spec;
    let d = s.item_width();
    let aw = s.attention_width();
    if behaviors.len() != buckets.len() {
        return Err(Error::Input(format!(
            "{} behaviors but {} buckets",
            behaviors.len(),
            buckets.len()
        )));
    }
    if target.len() != d || behaviors.iter().any(|h| h.len() != d) {
        return Err(Error::Input(format!("unified items must have width {d}")));
    }
    let mut x_t = target.to_vec();
    if let Some(ts) = params.layout.target_sim {
        x_t.extend_from_slice(&params.tensors[ts].data);
    }
    let mut x = Vec::with_capacity(behaviors.len() * aw);
    for (h, &b) in behaviors.iter().zip(buckets) {
        x.extend_from_slice(h);
        if let Some(bt) = params.layout.bucket {
            let t = &params.tensors[bt];
            if b >= t.rows {
                return Err(Error::Input(format!("bucket {b} outside {} buckets", t.rows)));
            }
            x.extend_from_slice(t.row(b));
        }
    }
    let (mut q, mut kq, mut probs, mut alpha, mut u) = Default::default();
    attend(
        params,
        &x_t,
        &x,
        behaviors.len(),
        &mut q,
        &mut kq,
        &mut probs,
        &mut alpha,
        &mut u,
    );
    Ok((u, alpha))
}

/// Element-wise `u ⊙ h_t`.
pub fn target_interaction(u: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    if u.len() != target.len() {
        return Err(Error::Input(format!(
            "interest width {} != target width {}",
            u.len(),
            target.len()
        )));
    }
    Ok(u.iter().zip(target).map(|(a, b)| a * b).collect())
}

/// Click probability from the head input `[interest, h_t, user, context]`.
pub fn predict(
    params: &ModelParams,
    interest: &[f64],
    target: &[f64],
    user_features: &[u32],
    context_features: &[u32],
) -> Result<f64> {
    let s = &params.spec;
    let d = s.item_width();
    if interest.len() != d || target.len() != d {
        return Err(Error::Input(format!("head inputs must have width {d}")));
    }
    let user = slot_rows(user_features, &s.user_vocab, "user")?;
    let context = slot_rows(context_features, &s.context_vocab, "context")?;
    let mut acts = vec![Vec::new(); params.layout.mlp.len()];
    acts[0].extend_from_slice(interest);
    acts[0].extend_from_slice(target);
    push_categorical(params, &user, &context, &mut acts[0]);
    Ok(sigmoid(mlp(params, &mut acts)?))
}

/// End-to-end forward for impression `n` of `corpus` given its retrieval.
pub fn forward(
    params: &ModelParams,
    corpus: &Corpus,
    n: usize,
    retrieved: &RetrievedSequence,
    semids: Option<&SemIdMap>,
) -> Result<(f64, ForwardCache)> {
    let s = &params.spec;
    let imp = corpus
        .impressions()
        .get(n)
        .ok_or_else(|| Error::Input(format!("impression {n} out of range")))?;
    let semid_of = |item: usize| -> Result<Option<&SemId>> {
        if !s.ablation.use_semid {
            return Ok(None);
        }
        let id = corpus.items()[item].item_id;
        semids
            .and_then(|m| m.get(&id))
            .map(Some)
            .ok_or(Error::MissingSemId(vec![id]))
    };
    let mut cache = ForwardCache {
        len: retrieved.len(),
        ..Default::default()
    };
    let t = corpus.target_index(n);
    let (ids, prefix) = item_rows(params, &corpus.items()[t].id_features, semid_of(t)?)?;
    cache.target_ids = ids;
    cache.target_prefix = prefix;
    for e in &retrieved.events {
        let i = e.item as usize;
        let (ids, prefix) = item_rows(params, &corpus.items()[i].id_features, semid_of(i)?)?;
        cache.ids.extend(ids);
        cache.prefix.extend(prefix);
        if s.ablation.use_simbucket && e.bucket >= s.buckets {
            return Err(Error::Input(format!(
                "bucket {} outside {} buckets",
                e.bucket, s.buckets
            )));
        }
        cache.buckets.push(e.bucket as u16);
    }
    cache.user_rows = slot_rows(&imp.user_features, &s.user_vocab, "user")?;
    cache.context_rows = slot_rows(&imp.context_features, &s.context_vocab, "context")?;
    let p = cache.run(params)?;
    Ok((p, cache))
}
