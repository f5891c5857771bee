//! Objective, hand-derived backward pass, optimizers, the training loop and
//! group AUC.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esu::{axpy, dot, forward_example, Ablation, ExampleSet, FeatureTable, ForwardCache, ModelParams};
use crate::tensor::TensorKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dense_lr: f64,
    pub sparse_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_every: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dense_lr: 2e-4,
            sparse_lr: 2e-3,
            batch_size: 1000,
            epochs: 1,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 0,
            ablation: Ablation::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.dense_lr) || !positive(self.sparse_lr) {
            return Err(Error::Config("training: learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "training: batch_size and epochs must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !positive(self.eps) {
            return Err(Error::Config(
                "training: betas must be in [0, 1) and eps positive".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("training: weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// `-[y ln p + (1-y) ln(1-p)]` computed from the logit.
pub fn bce_with_logit(logit: f64, y: u8) -> f64 {
    logit.max(0.0) - logit * y as f64 + (-logit.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a probability; saturated probabilities are
/// pulled just inside `(0, 1)` so the loss stays finite.
pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(f64::EPSILON, 1.0 - f64::EPSILON);
    bce_with_logit((p / (1.0 - p)).ln(), y)
}

/// Gradient rows of an embedding table. Only touched rows are non-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad {
    cols: usize,
    data: Vec<f64>,
    touched: Vec<u32>,
    mark: Vec<bool>,
}

impl SparseGrad {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            cols,
            data: vec![0.0; rows * cols],
            touched: Vec::new(),
            mark: vec![false; rows],
        }
    }

    #[inline]
    fn add(&mut self, row: u32, scale: f64, g: &[f64]) {
        let r = row as usize;
        if !self.mark[r] {
            self.mark[r] = true;
            self.touched.push(row);
        }
        axpy(scale, g, &mut self.data[r * self.cols..(r + 1) * self.cols]);
    }

    fn clear(&mut self) {
        for &r in &self.touched {
            let r = r as usize;
            self.mark[r] = false;
            self.data[r * self.cols..(r + 1) * self.cols].fill(0.0);
        }
        self.touched.clear();
    }

    /// Touched rows in ascending order with their gradients.
    pub fn rows(&self) -> impl Iterator<Item = (u32, &[f64])> {
        let mut t = self.touched.clone();
        t.sort_unstable();
        t.into_iter().map(move |r| (r, self.row(r)))
    }

    pub fn row(&self, r: u32) -> &[f64] {
        let r = r as usize;
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_touched(&self, r: u32) -> bool {
        self.mark[r as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Grad {
    Dense(Vec<f64>),
    Sparse(SparseGrad),
}

impl Grad {
    /// The gradient value at flat position `k` of the tensor.
    pub fn value(&self, k: usize) -> f64 {
        match self {
            Grad::Dense(v) => v[k],
            Grad::Sparse(s) => s.data[k],
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Grad::Dense(v) => v.iter().all(|x| x.is_finite()),
            Grad::Sparse(s) => s.touched.iter().all(|&r| s.row(r).iter().all(|x| x.is_finite())),
        }
    }
}

/// One gradient per parameter tensor, aligned with `ModelParams::tensors`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grads: Vec<Grad>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let grads = params
            .tensors
            .iter()
            .map(|t| match t.kind {
                TensorKind::Dense => Grad::Dense(vec![0.0; t.len()]),
                TensorKind::Sparse => Grad::Sparse(SparseGrad::new(t.rows, t.cols)),
            })
            .collect();
        Self { grads }
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            match g {
                Grad::Dense(v) => v.fill(0.0),
                Grad::Sparse(s) => s.clear(),
            }
        }
    }

    fn dense(&mut self, i: usize) -> &mut Vec<f64> {
        match &mut self.grads[i] {
            Grad::Dense(v) => v,
            Grad::Sparse(_) => unreachable!("tensor {i} is sparse"),
        }
    }

    fn sparse(&mut self, i: usize) -> &mut SparseGrad {
        match &mut self.grads[i] {
            Grad::Sparse(s) => s,
            Grad::Dense(_) => unreachable!("tensor {i} is dense"),
        }
    }

    fn matches(&self, params: &ModelParams) -> bool {
        self.grads.len() == params.tensors.len()
            && self.grads.iter().zip(&params.tensors).all(|(g, t)| match g {
                Grad::Dense(v) => t.kind == TensorKind::Dense && v.len() == t.len(),
                Grad::Sparse(s) => t.kind == TensorKind::Sparse && s.data.len() == t.len(),
            })
    }
}

/// Scatters the gradient of a unified item vector into its table rows.
fn scatter_unified(params: &ModelParams, grads: &mut GradientSet, ids: &[u32], prefix: &[u32], dh: &[f64]) {
    let mut at = 0;
    for (slot, &row) in ids.iter().enumerate() {
        let ti = params.layout.id[slot];
        let w = params.tensors[ti].cols;
        grads.sparse(ti).add(row, 1.0, &dh[at..at + w]);
        at += w;
    }
    if let Some(p) = params.layout.prefix {
        let w = params.tensors[p].cols;
        for &row in prefix {
            grads.sparse(p).add(row, 1.0, &dh[at..at + w]);
            at += w;
        }
    }
}

/// Adds `scale * d loss / d params` for one cached forward pass with label `y`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, y: u8, scale: f64, grads: &mut GradientSet) -> Result<()> {
    cache.check(params)?;
    if !grads.matches(params) {
        return Err(Error::Internal("gradient set does not match parameter shapes".into()));
    }
    let s = &params.spec;
    let lay = &params.layout;
    let d = s.item_width();
    let aw = s.attention_width();
    let (heads, hd) = (s.esu.heads, s.esu.head_dim);
    let l = cache.len;

    // Prediction head.
    let mut delta = vec![(cache.prob - y as f64) * scale];
    for (layer, &(wi, bi)) in lay.mlp.iter().enumerate().rev() {
        let w = &params.tensors[wi];
        let input = &cache.acts[layer];
        {
            let dw = grads.dense(wi);
            for (r, &g) in delta.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, input, &mut dw[r * w.cols..(r + 1) * w.cols]);
                }
            }
        }
        axpy(1.0, &delta, grads.dense(bi));
        let mut din = vec![0.0; w.cols];
        for (r, &g) in delta.iter().enumerate() {
            if g != 0.0 {
                axpy(g, w.row(r), &mut din);
            }
        }
        if layer > 0 {
            for (g, &a) in din.iter_mut().zip(&cache.acts[layer]) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        delta = din;
    }
    let dz = delta;

    // Categorical features.
    let mut at = 2 * d;
    for (slot, &row) in cache.user_rows.iter().enumerate() {
        let ti = lay.user[slot];
        let w = params.tensors[ti].cols;
        grads.sparse(ti).add(row, 1.0, &dz[at..at + w]);
        at += w;
    }
    for (slot, &row) in cache.context_rows.iter().enumerate() {
        let ti = lay.context[slot];
        let w = params.tensors[ti].cols;
        grads.sparse(ti).add(row, 1.0, &dz[at..at + w]);
        at += w;
    }

    // Interaction.
    let h_t = &cache.x_t[..d];
    let mut dx_t = vec![0.0; aw];
    dx_t[..d].copy_from_slice(&dz[d..2 * d]);
    let du: Vec<f64> = if s.ablation.use_target_interaction {
        for j in 0..d {
            dx_t[j] += dz[j] * cache.u[j];
        }
        dz[..d].iter().zip(h_t).map(|(a, b)| a * b).collect()
    } else {
        dz[..d].to_vec()
    };

    if l > 0 {
        // Aggregation and head averaging.
        let dalpha: Vec<f64> = (0..l).map(|i| dot(&du, &cache.x[i * aw..i * aw + d])).collect();
        let inv_heads = 1.0 / heads as f64;
        let c = 1.0 / (hd as f64).sqrt();
        let mut ds = vec![0.0; heads * l];
        let mut dkq = vec![0.0; heads * aw];
        for a in 0..heads {
            let p = &cache.probs[a * l..(a + 1) * l];
            let mean: f64 = p.iter().zip(&dalpha).map(|(pi, g)| pi * g * inv_heads).sum();
            for i in 0..l {
                let v = p[i] * (dalpha[i] * inv_heads - mean);
                ds[a * l + i] = v;
                axpy(v, &cache.x[i * aw..(i + 1) * aw], &mut dkq[a * aw..(a + 1) * aw]);
            }
        }
        // kq_a = c * sum_{r in head a} q_r Wk[r, :]
        let wq = &params.tensors[lay.wq];
        let wk = &params.tensors[lay.wk];
        let mut dq = vec![0.0; heads * hd];
        {
            let dwk = grads.dense(lay.wk);
            for r in 0..heads * hd {
                let a = r / hd;
                let g = &dkq[a * aw..(a + 1) * aw];
                axpy(c * cache.q[r], g, &mut dwk[r * aw..(r + 1) * aw]);
                dq[r] = c * dot(wk.row(r), g);
            }
        }
        {
            let dwq = grads.dense(lay.wq);
            for r in 0..heads * hd {
                axpy(dq[r], &cache.x_t, &mut dwq[r * aw..(r + 1) * aw]);
            }
        }
        for r in 0..heads * hd {
            axpy(dq[r], wq.row(r), &mut dx_t);
        }

        // Behavior inputs.
        let slots = s.id_vocab.len();
        let depth = if s.ablation.use_semid { s.esu.prefix_depth } else { 0 };
        let mut dx = vec![0.0; aw];
        for i in 0..l {
            dx.fill(0.0);
            for a in 0..heads {
                axpy(ds[a * l + i], &cache.kq[a * aw..(a + 1) * aw], &mut dx);
            }
            axpy(cache.alpha[i], &du, &mut dx[..d]);
            scatter_unified(
                params,
                grads,
                &cache.ids[i * slots..(i + 1) * slots],
                &cache.prefix[i * depth..(i + 1) * depth],
                &dx[..d],
            );
            if let Some(b) = lay.bucket {
                grads.sparse(b).add(cache.buckets[i] as u32, 1.0, &dx[d..]);
            }
        }
    }

    // Target side.
    scatter_unified(params, grads, &cache.target_ids, &cache.target_prefix, &dx_t[..d]);
    if let Some(ts) = lay.target_sim {
        axpy(1.0, &dx_t[d..], grads.dense(ts));
    }
    Ok(())
}

/// AdamW on dense tensors, lazy Adam on the touched rows of embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub dense_lr: f64,
    pub sparse_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        Self {
            dense_lr: cfg.dense_lr,
            sparse_lr: cfg.sparse_lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient rejects the whole step and
    /// leaves parameters and optimizer state untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientSet) -> Result<()> {
        if !grads.matches(params) {
            return Err(Error::Internal("gradient set does not match parameter shapes".into()));
        }
        if let Some(i) = grads.grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                layer: i,
                msg: format!("non-finite gradient in {}; step rejected", params.tensors[i].name),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let adam = |w: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        };
        for (i, (tensor, g)) in params.tensors.iter_mut().zip(&grads.grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match g {
                Grad::Dense(g) => {
                    let decay = 1.0 - self.dense_lr * self.weight_decay;
                    for k in 0..tensor.data.len() {
                        tensor.data[k] *= decay;
                        adam(&mut tensor.data[k], g[k], &mut m[k], &mut v[k], self.dense_lr);
                    }
                }
                Grad::Sparse(s) => {
                    for &r in &s.touched {
                        let base = r as usize * s.cols;
                        for k in base..base + s.cols {
                            adam(&mut tensor.data[k], s.data[k], &mut m[k], &mut v[k], self.sparse_lr);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    /// Mean training loss of the batch.
    pub loss: f64,
    pub eval_gauc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<MetricRecord>,
    pub rejected_steps: usize,
}

/// Mini-batch training over `train` in seeded shuffled order.
pub fn train(
    mut params: ModelParams,
    features: &FeatureTable,
    train: &ExampleSet,
    eval: Option<&ExampleSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training split has no impressions".into()));
    }
    let mut opt = Optimizer::new(&params, cfg);
    let mut grads = GradientSet::zeros_like(&params);
    let mut cache = ForwardCache::default();
    let mut metrics = Vec::new();
    let mut rejected = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = batches_per_epoch * cfg.epochs;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        // Stream 0 of the seed initializes parameters; shuffles use later streams.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &n in batch {
                let ex = train.get(n);
                forward_example(&params, features, &ex, &mut cache)?;
                loss += bce_with_logit(cache.logit, ex.label);
                backward(&params, &cache, ex.label, scale, &mut grads)?;
            }
            match opt.step(&mut params, &grads) {
                Ok(()) => {}
                Err(Error::Numeric { .. }) => rejected += 1,
                Err(e) => return Err(e),
            }
            step += 1;
            let due = step == total || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
            let eval_gauc = match eval {
                Some(set) if due => Some(evaluate(&params, features, set)?),
                _ => None,
            };
            metrics.push(MetricRecord {
                step,
                loss: loss * scale,
                eval_gauc,
            });
        }
    }
    Ok(TrainOutcome {
        params,
        metrics,
        rejected_steps: rejected,
    })
}

/// Click probabilities for every example of `set`.
pub fn predict_all(params: &ModelParams, features: &FeatureTable, set: &ExampleSet) -> Result<Vec<f64>> {
    let mut cache = ForwardCache::default();
    (0..set.len())
        .map(|n| forward_example(params, features, &set.get(n), &mut cache))
        .collect()
}

/// GAUC of the model on `set`.
pub fn evaluate(params: &ModelParams, features: &FeatureTable, set: &ExampleSet) -> Result<f64> {
    let preds = predict_all(params, features, set)?;
    gauc(set.users(), &preds, set.labels())
}

/// Rank-statistic AUC with midranks for ties; `None` for single-class input.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Impression-weighted mean of per-user AUC; single-class users are skipped.
pub fn gauc(users: &[u64], scores: &[f64], labels: &[u8]) -> Result<f64> {
    if users.len() != scores.len() || users.len() != labels.len() {
        return Err(Error::Input("users, scores and labels differ in length".into()));
    }
    let mut groups: BTreeMap<u64, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&u, &s), &y) in users.iter().zip(scores).zip(labels) {
        let g = groups.entry(u).or_default();
        g.0.push(s);
        g.1.push(y);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, y) in groups.values() {
        if let Some(a) = auc(s, y) {
            num += a * s.len() as f64;
            den += s.len() as f64;
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("no user has both clicks and non-clicks".into()));
    }
    Ok(num / den)
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub checked: usize,
    /// Per tensor, how many entries have an analytic gradient above the floor.
    pub nonzero: Vec<(String, usize)>,
}

/// Compares [`backward`] against central finite differences of the batch-mean
/// loss for every scalar parameter. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    params: &ModelParams,
    features: &FeatureTable,
    set: &ExampleSet,
    eps: f64,
    floor: f64,
) -> Result<GradCheck> {
    let mut cache = ForwardCache::default();
    let scale = 1.0 / set.len() as f64;
    let loss = |p: &ModelParams, cache: &mut ForwardCache| -> Result<f64> {
        let mut total = 0.0;
        for n in 0..set.len() {
            let ex = set.get(n);
            forward_example(p, features, &ex, cache)?;
            total += bce_with_logit(cache.logit, ex.label);
        }
        Ok(total * scale)
    };
    let mut grads = GradientSet::zeros_like(params);
    for n in 0..set.len() {
        let ex = set.get(n);
        forward_example(params, features, &ex, &mut cache)?;
        backward(params, &cache, ex.label, scale, &mut grads)?;
    }
    let mut work = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        checked: 0,
        nonzero: Vec::new(),
    };
    for ti in 0..work.tensors.len() {
        let mut nonzero = 0;
        for k in 0..work.tensors[ti].len() {
            let orig = work.tensors[ti].data[k];
            work.tensors[ti].data[k] = orig + eps;
            let up = loss(&work, &mut cache)?;
            work.tensors[ti].data[k] = orig - eps;
            let down = loss(&work, &mut cache)?;
            work.tensors[ti].data[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.grads[ti].value(k);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_tensor = work.tensors[ti].name.clone();
            }
            report.checked += 1;
            nonzero += usize::from(analytic.abs() > floor);
        }
        report.nonzero.push((work.tensors[ti].name.clone(), nonzero));
    }
    Ok(report)
}
