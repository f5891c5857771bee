//! Acceptance checks 1-12. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,2,5` restricts the run to the listed criteria;
//! `ACCEPTANCE_STRICT=1` makes any failure a non-zero exit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semrec::analysis::{
    cluster, dispersion_for, entropy_gain, impression_groups, information_gain, interest_vectors, mutual_information,
    permutation_null, quantile, DiscreteJoint, DispersionConfig, DispersionReport, Grouping,
};
use semrec::data::{
    generate_synthetic, BehaviorEvent, BehaviorSequence, Corpus, CorpusMeta, Impression, ItemRecord, SynthConfig,
};
use semrec::esu::{target_attention, Ablation, EsuConfig, ExampleSet, FeatureTable, ModelParams, ModelSpec};
use semrec::experiment::{
    calibrate, init_model, model_spec, prepare, quantize, retrieve_all, train_model, Model, PrepareConfig,
    QuantizerConfig, SimilarityConfig,
};
use semrec::gsu::{
    bench_retrieval, hard_retrieve, soft_retrieve, FallbackPolicy, GsuConfig, IndexSet, RetrievalTag, Strategy, Target,
};
use semrec::quantizer::{pack_prefix, PrefixVocab, SemId, SemIdMap};
use semrec::similarity::{bucketize, BucketConfig, SimRange};
use semrec::training::{gradient_check, TrainConfig};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const MI_CLUSTERS: [usize; 3] = [8, 32, 128];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient oracle

fn randomize(params: &mut ModelParams, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let hidden_biases: Vec<usize> = params.layout.mlp.iter().rev().skip(1).map(|&(_, b)| b).collect();
    for (i, t) in params.tensors.iter_mut().enumerate() {
        // Positive hidden biases keep the ReLUs alive so every path carries gradient.
        let (lo, hi) = if hidden_biases.contains(&i) {
            (0.5, 1.0)
        } else {
            (-scale, scale)
        };
        for v in &mut t.data {
            *v = rng.random_range(lo..=hi);
        }
    }
}

fn tiny_esu() -> EsuConfig {
    EsuConfig {
        id_widths: vec![3, 2],
        user_widths: vec![2, 2],
        context_widths: vec![2],
        prefix_width: 3,
        prefix_depth: 2,
        bucket_width: 3,
        heads: 2,
        head_dim: 4,
        mlp_hidden: vec![6, 4],
    }
}

fn gradient_oracle() -> Verdict {
    let mut worst = (0.0f64, String::new());
    let mut dead = Vec::new();
    let mut max_width = 0;
    for (i, ab) in [
        Ablation::BASE,
        Ablation::SEMID,
        Ablation::SIMBUCKET,
        Ablation::SIMBUCKET_SEMID,
        Ablation::FULL,
    ]
    .into_iter()
    .enumerate()
    {
        for seed in [11u64, 12] {
            let seed = seed + 10 * i as u64;
            let corpus = generate_synthetic(&SynthConfig {
                seed,
                n_users: 4,
                n_items: 60,
                n_clusters: 4,
                dim: 8,
                seq_len_min: 4,
                seq_len_max: 10,
                impressions_per_user: 3,
                user_vocab: vec![3, 2],
                context_vocab: vec![3],
                ..SynthConfig::default()
            })
            .unwrap();
            let (_, semids) = quantize(
                &corpus,
                &QuantizerConfig {
                    levels: 2,
                    codebook_size: 4,
                },
                seed,
            )
            .unwrap();
            let sim = SimilarityConfig {
                buckets: 8,
                sample_size: 1000,
                ..SimilarityConfig::default()
            };
            let bucket = calibrate(&corpus, &sim, seed).unwrap();
            let gsu = GsuConfig {
                k_ret: 8,
                ..GsuConfig::default()
            };
            let retrieved = retrieve_all(&corpus, &gsu, &bucket, Some(&semids)).unwrap();
            let spec = model_spec(&tiny_esu(), ab, corpus.meta(), 8, 4);
            max_width = max_width.max(spec.attention_width());
            let mut params = init_model(spec, Some(&semids), seed).unwrap();
            randomize(&mut params, 0.5, seed);
            let features = FeatureTable::build(&params, &corpus, Some(&semids)).unwrap();
            let set = ExampleSet::build(&params, &corpus, &retrieved).unwrap();
            let r = gradient_check(&params, &features, &set, 1e-5, 1e-6).unwrap();
            if r.max_rel_error > worst.0 || worst.1.is_empty() {
                worst = (r.max_rel_error, format!("{} / {}", ab.label(), r.worst_tensor));
            }
            dead.extend(
                r.nonzero
                    .iter()
                    .filter(|(_, n)| *n == 0)
                    .map(|(t, _)| format!("{}:{t}", ab.label())),
            );
        }
    }
    Verdict::new(
        worst.0 < 1e-4 && dead.is_empty(),
        format!(
            "max rel err {:.2e} at {} (D<={max_width}, L<=8, B=8, M=K=2); tensors without signal: {dead:?}",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Retrieval oracles

fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// 1000 users with histories of 0..=2000 events over a catalog with
/// duplicated and zero embeddings, one impression each.
fn retrieval_corpus(seed: u64) -> (Corpus, SemIdMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let n_items = 300u64;
    let mut items: Vec<ItemRecord> = Vec::new();
    for id in 0..n_items {
        let emb: Vec<f32> = match id % 50 {
            0 => vec![0.0; dim],
            1..=5 if id > 50 => items[(id - 50) as usize].mm_embedding.clone(),
            _ => (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        };
        items.push(ItemRecord {
            item_id: 1000 + id,
            id_features: vec![],
            mm_embedding: emb,
        });
    }
    let mut sequences = Vec::new();
    let mut impressions = Vec::new();
    for u in 0..1000u64 {
        let n = if u == 0 { 2000 } else { rng.random_range(0..=2000usize) };
        let mut t = 0i64;
        let events: Vec<BehaviorEvent> = (0..n)
            .map(|_| {
                t += rng.random_range(1..4);
                BehaviorEvent {
                    item_id: 1000 + rng.random_range(0..n_items),
                    timestamp: t,
                }
            })
            .collect();
        let before = if rng.random_bool(0.8) {
            t + 1
        } else {
            rng.random_range(0..=t + 1)
        };
        impressions.push(Impression {
            user_id: u,
            target_item_id: 1000 + rng.random_range(0..n_items),
            context_features: vec![],
            user_features: vec![],
            label: 0,
            event_time: before,
        });
        sequences.push(BehaviorSequence { user_id: u, events });
    }
    let meta = CorpusMeta {
        dim,
        id_vocab: vec![],
        user_vocab: vec![],
        context_vocab: vec![],
        seed: Some(seed),
        n_items: 0,
        n_users: 0,
        n_impressions: 0,
    };
    let semids = items
        .iter()
        .map(|it| (it.item_id, SemId(vec![rng.random_range(0..12), rng.random_range(0..4)])))
        .collect();
    (Corpus::new(meta, items, sequences, impressions).unwrap(), semids)
}

fn retrieval_oracles() -> Verdict {
    let (corpus, semids) = retrieval_corpus(2024);
    let bucket = BucketConfig::new(40, SimRange::new(-1.0, 1.0).unwrap()).unwrap();
    let indexes = IndexSet::build(&corpus, &semids).unwrap();
    let emb = |id: u64| corpus.embedding(corpus.item_index(id).unwrap());
    let mut soft_bad = 0;
    let mut hard_bad = 0;
    let mut max_n = 0;
    for (n, imp) in corpus.impressions().iter().enumerate() {
        let k_ret = [1usize, 10, 50, 200][n % 4];
        let target = Target::of_item(&corpus, corpus.target_index(n), &bucket);
        let seq = &corpus.sequences()[corpus.user_index(imp.user_id).unwrap()];
        let visible: Vec<(usize, &BehaviorEvent)> = seq
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.timestamp < imp.event_time)
            .collect();
        max_n = max_n.max(visible.len());
        let t_emb = emb(imp.target_item_id);

        // Soft: every event strictly above the K-th best similarity must be
        // returned, nothing strictly below it may be, and sizes must agree.
        let got = soft_retrieve(&corpus, corpus.visible_history(n), &target, k_ret);
        let mut sims: Vec<f64> = visible
            .iter()
            .map(|(_, e)| oracle_cosine(emb(e.item_id), t_emb))
            .collect();
        let expect_len = k_ret.min(visible.len());
        let ok = if expect_len == 0 {
            got.is_empty()
        } else {
            let mut sorted = sims.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let kth = sorted[expect_len - 1];
            let chosen: Vec<usize> = got
                .events
                .iter()
                .map(|r| visible.iter().position(|(_, e)| e.timestamp == r.timestamp).unwrap())
                .collect();
            let mut distinct = chosen.clone();
            distinct.dedup();
            got.len() == expect_len
                && distinct.len() == chosen.len()
                && chosen.windows(2).all(|w| w[0] < w[1])
                && chosen.iter().all(|&p| sims[p] >= kth - 1e-12)
                && got
                    .events
                    .iter()
                    .zip(&chosen)
                    .all(|(r, &p)| (r.similarity - sims[p]).abs() < 1e-12)
                && (0..visible.len())
                    .filter(|p| sims[*p] > kth + 1e-12)
                    .all(|p| chosen.contains(&p))
        };
        soft_bad += usize::from(!ok);
        sims.clear();

        // Hard: naive filter on the target's top-level code, most recent K.
        let code = semids[&imp.target_item_id].top();
        let matching: Vec<&BehaviorEvent> = visible
            .iter()
            .filter(|(_, e)| semids[&e.item_id].top() == code)
            .map(|(_, e)| *e)
            .collect();
        let (expect, tag): (Vec<&BehaviorEvent>, _) = if matching.is_empty() {
            (visible.iter().map(|(_, e)| *e).collect(), RetrievalTag::Fallback)
        } else {
            (matching, RetrievalTag::Hard)
        };
        let expect = &expect[expect.len().saturating_sub(k_ret)..];
        let index = indexes.get(imp.user_id).unwrap();
        let got = hard_retrieve(
            &corpus,
            index,
            code,
            &target,
            k_ret,
            FallbackPolicy::Recency,
            imp.event_time,
        );
        let ok = got.tag == tag
            && got.len() == expect.len()
            && got
                .events
                .iter()
                .zip(expect)
                .all(|(r, e)| r.item_id == e.item_id && r.timestamp == e.timestamp);
        hard_bad += usize::from(!ok);
    }
    let total = corpus.impressions().len();
    Verdict::new(
        soft_bad == 0 && hard_bad == 0,
        format!("{total} instances, N up to {max_n}: soft mismatches {soft_bad}, hard mismatches {hard_bad}"),
    )
}

// ---------------------------------------------------------------------------
// 3. Bucketization

fn bucketization() -> Verdict {
    let mut problems = Vec::new();
    for range in [SimRange::new(-1.0, 1.0).unwrap(), SimRange::new(-0.3, 0.85).unwrap()] {
        for b in [1usize, 20, 40, 100] {
            let cfg = BucketConfig::new(b, range).unwrap();
            let grid: Vec<f64> = (0..=10_000).map(|i| -1.0 + 2.0 * i as f64 / 10_000.0).collect();
            let q: Vec<usize> = grid.iter().map(|&s| bucketize(s, &cfg)).collect();
            let tag = format!("B={b} [{}, {}]", range.s_min, range.s_max);
            if q.iter().any(|&x| x >= b) {
                problems.push(format!("{tag}: out of range"));
            }
            if q.windows(2).any(|w| w[1] < w[0]) {
                problems.push(format!("{tag}: not monotone"));
            }
            if bucketize(range.s_max, &cfg) != b - 1 || bucketize(range.s_min, &cfg) != 0 {
                problems.push(format!("{tag}: endpoints not clipped to boundary buckets"));
            }
            if bucketize(1.0, &cfg) != b - 1 || bucketize(-1.0, &cfg) != 0 || bucketize(f64::NAN, &cfg) != 0 {
                problems.push(format!("{tag}: outside-range values"));
            }
            // Every bucket is reached and spans about (s_max - s_min) / B of the grid.
            let mut span: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
            for (&s, &x) in grid.iter().zip(&q) {
                if s >= range.s_min && s <= range.s_max {
                    let e = span.entry(x).or_insert((s, s));
                    e.1 = s;
                }
            }
            let width = (range.s_max - range.s_min) / b as f64;
            if span.len() != b {
                problems.push(format!("{tag}: {} of {b} buckets reached", span.len()));
            }
            for (x, (lo, hi)) in &span {
                let expect_lo = range.s_min + *x as f64 * width;
                if (lo - expect_lo).abs() > 2.0 * 2e-4 || (hi - lo) > width + 1e-9 {
                    problems.push(format!("{tag}: bucket {x} spans [{lo}, {hi}]"));
                }
            }
        }
    }
    Verdict::new(
        problems.is_empty(),
        format!("10,001-point grid, B in {{1, 20, 40, 100}}, 2 ranges; issues: {problems:?}"),
    )
}

// ---------------------------------------------------------------------------
// 4. Quantizer

fn quantizer() -> Verdict {
    let mut curves = Vec::new();
    let mut monotone = true;
    for seed in [1u64, 2, 3] {
        let corpus = generate_synthetic(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let (books, _) = quantize(
            &corpus,
            &QuantizerConfig {
                levels: 3,
                codebook_size: 256,
            },
            seed,
        )
        .unwrap();
        monotone &= books.level_mse.windows(2).all(|w| w[1] <= w[0]);
        curves.push(
            books
                .level_mse
                .iter()
                .map(|m| format!("{m:.4}"))
                .collect::<Vec<_>>()
                .join(">"),
        );
    }
    let c = 16u32;
    let mut keys = std::collections::HashSet::new();
    let mut total = 0usize;
    for a in 0..c {
        keys.insert(pack_prefix(&[a], c as usize).unwrap());
        total += 1;
        for b in 0..c {
            keys.insert(pack_prefix(&[a, b], c as usize).unwrap());
            total += 1;
            for d in 0..c {
                keys.insert(pack_prefix(&[a, b, d], c as usize).unwrap());
                total += 1;
            }
        }
    }
    let injective = keys.len() == total;
    Verdict::new(
        monotone && injective,
        format!(
            "per-level MSE (M=3, C=256) {curves:?}; packing {} distinct keys of {total} prefixes (C=16, K=3)",
            keys.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Attention invariants

fn attention() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = BTreeMap::<&str, usize>::new();
    let instances = 10_000;
    let per_model = 250;
    let mut params = None;
    for n in 0..instances {
        if n % per_model == 0 {
            let ablation = Ablation {
                use_semid: rng.random_bool(0.5),
                use_simbucket: rng.random_bool(0.5),
                use_target_interaction: rng.random_bool(0.5),
            };
            let spec = ModelSpec {
                esu: EsuConfig {
                    heads: rng.random_range(1..4),
                    head_dim: rng.random_range(1..8),
                    ..tiny_esu()
                },
                ablation,
                id_vocab: vec![10, 3],
                user_vocab: vec![3, 2],
                context_vocab: vec![3],
                buckets: 8,
                codebook_size: 4,
            };
            let vocab = PrefixVocab::build(
                (0..4)
                    .flat_map(|a| (0..4).map(move |b| SemId(vec![a, b])))
                    .collect::<Vec<_>>()
                    .iter(),
                2,
                4,
            )
            .unwrap();
            let seed = n as u64;
            let mut p = ModelParams::init(spec, vocab, seed).unwrap();
            randomize(&mut p, rng.random_range(0.1..2.0), seed);
            params = Some(p);
        }
        let p = params.as_ref().unwrap();
        let d = p.spec.item_width();
        let l = match n % 10 {
            0 => 0,
            1 => 1,
            _ => rng.random_range(2..=32),
        };
        let scale = rng.random_range(0.1..3.0);
        let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| rng.random_range(-scale..scale)).collect() };
        let hs: Vec<Vec<f64>> = (0..l).map(|_| vec(&mut rng)).collect();
        let t = vec(&mut rng);
        let buckets: Vec<usize> = (0..l).map(|_| rng.random_range(0..8)).collect();
        let (u, alpha) = target_attention(p, &hs, &buckets, &t).unwrap();
        let mut fail = |what| *failures.entry(what).or_default() += 1;
        match l {
            0 => {
                if !alpha.is_empty() || u.len() != d || u.iter().any(|&x| x != 0.0) {
                    fail("L=0 zero vector");
                }
            }
            1 => {
                if alpha.len() != 1
                    || (alpha[0] - 1.0).abs() > 1e-12
                    || u.iter().zip(&hs[0]).any(|(a, b)| (a - b).abs() > 1e-12)
                {
                    fail("L=1 identity");
                }
            }
            _ => {
                if (alpha.iter().sum::<f64>() - 1.0).abs() > 1e-12 || alpha.iter().any(|a| a.is_nan() || *a < 0.0) {
                    fail("sum to one");
                }
                let mut perm: Vec<usize> = (0..l).collect();
                perm.shuffle(&mut rng);
                let hp: Vec<Vec<f64>> = perm.iter().map(|&i| hs[i].clone()).collect();
                let bp: Vec<usize> = perm.iter().map(|&i| buckets[i]).collect();
                let (u2, alpha2) = target_attention(p, &hp, &bp, &t).unwrap();
                let same_alpha = perm
                    .iter()
                    .enumerate()
                    .all(|(k, &i)| (alpha2[k] - alpha[i]).abs() < 1e-12);
                let same_u = u.iter().zip(&u2).all(|(a, b)| (a - b).abs() < 1e-9 * (1.0 + a.abs()));
                if !same_alpha || !same_u {
                    fail("permutation equivariance");
                }
            }
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!("{instances} random instances; failures {failures:?}"),
    )
}

// ---------------------------------------------------------------------------
// 6-10. Desk-scale runs on the planted corpus

const ABLATIONS: [Ablation; 5] = [
    Ablation::BASE,
    Ablation::SEMID,
    Ablation::SIMBUCKET,
    Ablation::SIMBUCKET_SEMID,
    Ablation::FULL,
];

fn desk_synth(seed: u64, w_affinity: f64) -> SynthConfig {
    SynthConfig {
        seed,
        n_users: 2000,
        n_items: 2000,
        dim: 64,
        seq_len_min: 50,
        seq_len_max: 150,
        impressions_per_user: 100,
        w_affinity,
        ..SynthConfig::default()
    }
}

fn desk_prepare() -> PrepareConfig {
    PrepareConfig {
        quantizer: QuantizerConfig {
            levels: 3,
            codebook_size: 32,
        },
        ..PrepareConfig::default()
    }
}

fn desk_esu() -> EsuConfig {
    EsuConfig {
        mlp_hidden: vec![64, 32],
        ..EsuConfig::default()
    }
}

fn desk_train(seed: u64, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        dense_lr: 2e-3,
        sparse_lr: 2e-2,
        batch_size: 256,
        seed,
        ablation,
        ..TrainConfig::default()
    }
}

struct SeedRun {
    impressions: usize,
    gauc: [f64; 5],
    gain_semid: f64,
    gain_sim: f64,
    dispersion: DispersionReport,
    mi_full: Vec<f64>,
    mi_base: Vec<f64>,
    untrained_mi: Vec<f64>,
    untrained_null: Vec<f64>,
    seconds: f64,
}

fn mi_curve(model: &Model, seed: u64, null: bool) -> (Vec<f64>, Vec<f64>) {
    let reps = interest_vectors(&model.params, &model.features, &model.eval_set, 20_000).unwrap();
    let labels = &model.eval_set.labels()[..reps.len()];
    let mut mi = Vec::new();
    let mut p99 = Vec::new();
    for k in MI_CLUSTERS {
        let groups: Vec<u64> = cluster(&reps, k, seed).unwrap().into_iter().map(|c| c as u64).collect();
        mi.push(mutual_information(&DiscreteJoint::from_pairs(&groups, labels).unwrap()));
        if null {
            p99.push(quantile(&permutation_null(&groups, labels, 200, seed).unwrap(), 0.99));
        }
    }
    (mi, p99)
}

fn desk_run(seed: u64) -> SeedRun {
    let start = Instant::now();
    let corpus = generate_synthetic(&desk_synth(seed, 1.5)).unwrap();
    let data = prepare(&corpus, &desk_prepare(), seed).unwrap();
    let labels: Vec<u8> = data.eval.impressions().iter().map(|i| i.label).collect();
    let gain = |g: Grouping| {
        let groups =
            impression_groups(&data.eval, &data.eval_retrieved, data.semids.as_ref(), &data.bucket, &g).unwrap();
        information_gain(&groups, &labels).unwrap()
    };
    let gain_semid = gain(Grouping::SemidLevel1);
    let gain_sim = gain(Grouping::SimBucket);
    let dispersion = dispersion_for(&data, &DispersionConfig::default()).unwrap();

    let untrained = Model::new(&data, &desk_esu(), Ablation::FULL, seed).unwrap();
    let (untrained_mi, untrained_null) = mi_curve(&untrained, seed, true);

    let mut gauc = [0.0; 5];
    let mut mi_full = Vec::new();
    let mut mi_base = Vec::new();
    for (i, ab) in ABLATIONS.into_iter().enumerate() {
        let run = train_model(&data, &desk_esu(), &desk_train(seed, ab)).unwrap();
        gauc[i] = run.eval_gauc;
        if ab == Ablation::FULL {
            mi_full = mi_curve(&run.model, seed, false).0;
        } else if ab == Ablation::BASE {
            mi_base = mi_curve(&run.model, seed, false).0;
        }
    }
    let r = SeedRun {
        impressions: corpus.impressions().len(),
        gauc,
        gain_semid,
        gain_sim,
        dispersion,
        mi_full,
        mi_base,
        untrained_mi,
        untrained_null,
        seconds: start.elapsed().as_secs_f64(),
    };
    println!(
        "    seed {seed}: {} impressions, GAUC base {:.4} semid {:.4} simbucket {:.4} simbucket+semid {:.4} full {:.4} ({:.0}s)",
        r.impressions, r.gauc[0], r.gauc[1], r.gauc[2], r.gauc[3], r.gauc[4], r.seconds
    );
    r
}

fn learning_signal(runs: &[SeedRun]) -> Verdict {
    let full_ok = runs.iter().filter(|r| r.gauc[4] >= 0.65).count();
    let beats = runs.iter().filter(|r| r.gauc[4] > r.gauc[0]).count();
    let min_imp = runs.iter().map(|r| r.impressions).min().unwrap_or(0);
    let minutes = runs.iter().map(|r| r.seconds).fold(0.0, f64::max) / 60.0;
    let full: Vec<String> = runs.iter().map(|r| format!("{:.4}", r.gauc[4])).collect();
    Verdict::new(
        full_ok == runs.len() && beats >= 4 && min_imp >= 200_000,
        format!(
            "full GAUC {full:?} (>= 0.65 in {full_ok}/{}), full > base in {beats}/{} seeds, {min_imp} impressions, slowest seed {minutes:.1} min",
            runs.len(),
            runs.len()
        ),
    )
}

fn ablation_ordering(runs: &[SeedRun]) -> Verdict {
    let mean = |i: usize| runs.iter().map(|r| r.gauc[i]).sum::<f64>() / runs.len() as f64;
    let m: Vec<f64> = (0..5).map(mean).collect();
    let ok = m[0] <= m[1] && m[0] <= m[2] && m[2] <= m[3];
    Verdict::new(
        ok,
        format!(
            "mean GAUC base {:.4} | +semid {:.4} | +simbucket {:.4} | +simbucket+semid {:.4} | full {:.4}",
            m[0], m[1], m[2], m[3], m[4]
        ),
    )
}

/// Definitional MI from the expanded sample: marginals by counting outcomes.
fn brute_force_mi(counts: &[[u64; 3]; 3]) -> f64 {
    let mut sample = Vec::new();
    for (g, row) in counts.iter().enumerate() {
        for (y, &c) in row.iter().enumerate() {
            sample.extend(std::iter::repeat_n((g, y), c as usize));
        }
    }
    let n = sample.len() as f64;
    let mut mi = 0.0;
    for g in 0..3 {
        for y in 0..3 {
            let joint = sample.iter().filter(|&&(a, b)| a == g && b == y).count() as f64 / n;
            if joint == 0.0 {
                continue;
            }
            let pg = sample.iter().filter(|&&(a, _)| a == g).count() as f64 / n;
            let py = sample.iter().filter(|&&(_, b)| b == y).count() as f64 / n;
            mi += joint * (joint / (pg * py)).ln();
        }
    }
    mi
}

fn information_gain_analogue(runs: &[SeedRun]) -> Verdict {
    let wins = runs.iter().filter(|r| r.gain_semid > r.gain_sim).count();
    let gains: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.4}/{:.4}", r.gain_semid, r.gain_sim))
        .collect();

    let mut tables = 0usize;
    let mut worst = 0.0f64;
    for code in 1..5u32.pow(9) {
        let mut counts = [[0u64; 3]; 3];
        let mut c = code;
        for cell in counts.iter_mut().flatten() {
            *cell = (c % 5) as u64;
            c /= 5;
        }
        let joint = DiscreteJoint::from_counts(counts.iter().map(|r| r.to_vec()).collect()).unwrap();
        let oracle = brute_force_mi(&counts);
        worst = worst
            .max((mutual_information(&joint) - oracle).abs())
            .max((entropy_gain(&joint) - oracle).abs());
        tables += 1;
    }
    Verdict::new(
        wins >= 4 && worst <= 1e-12,
        format!(
            "I(Y;SemId)/I(Y;SimBucket) nats {gains:?}, SemId wins {wins}/{}; {tables} 3x3 tables, max |MI - oracle| {worst:.1e}",
            runs.len()
        ),
    )
}

fn spread(r: &DispersionReport) -> (f64, f64) {
    let bins: Vec<_> = r.bins.iter().filter(|b| b.dof > 0).collect();
    let n = bins.len().max(1) as f64;
    (
        bins.iter().map(|b| b.ctr_std).sum::<f64>() / n,
        bins.iter().map(|b| b.binomial_std).sum::<f64>() / n,
    )
}

fn dispersion_analogue(runs: &[SeedRun]) -> Verdict {
    let mut null_ok = 0;
    let mut null_desc = Vec::new();
    for seed in SEEDS {
        let corpus = generate_synthetic(&desk_synth(seed, 0.0)).unwrap();
        let data = prepare(&corpus, &desk_prepare(), seed).unwrap();
        let r = dispersion_for(&data, &DispersionConfig::default()).unwrap();
        let p = r.pooled_p_value();
        let (s, b) = spread(&r);
        null_ok += usize::from(p.is_some_and(|p| p >= 0.01));
        null_desc.push(format!("p={:.3} std {s:.4} vs binomial {b:.4}", p.unwrap_or(f64::NAN)));
    }
    let mut planted_ok = 0;
    let mut planted_desc = Vec::new();
    for r in runs {
        let p = r.dispersion.pooled_p_value();
        let (s, b) = spread(&r.dispersion);
        planted_ok += usize::from(p.is_some_and(|p| p < 0.01) && s > b);
        planted_desc.push(format!("p={:.1e} std {s:.4} vs binomial {b:.4}", p.unwrap_or(f64::NAN)));
    }
    Verdict::new(
        null_ok >= 4 && planted_ok >= 4,
        format!(
            "w2=0: consistent with binomial noise in {null_ok}/5 {null_desc:?}; w2=1.5: exceeds it in {planted_ok}/{} {planted_desc:?}",
            runs.len()
        ),
    )
}

fn mi_discriminability(runs: &[SeedRun]) -> Verdict {
    let trained_ok = runs
        .iter()
        .all(|r| r.mi_full.iter().zip(&r.mi_base).all(|(f, b)| f > b));
    let untrained_ok = runs
        .iter()
        .all(|r| r.untrained_mi.iter().zip(&r.untrained_null).all(|(m, n)| m < n));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/");
    let detail: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "full {} base {} untrained {} null99 {}",
                fmt(&r.mi_full),
                fmt(&r.mi_base),
                fmt(&r.untrained_mi),
                fmt(&r.untrained_null)
            )
        })
        .collect();
    Verdict::new(
        trained_ok && untrained_ok,
        format!(
            "k=8/32/128; trained full > base on every seed: {trained_ok}; untrained below permutation p99: {untrained_ok}; {detail:?}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 11. Serving cost

fn serving_cost() -> Verdict {
    let corpus = generate_synthetic(&SynthConfig {
        seed: 11,
        n_users: 100,
        n_items: 4000,
        dim: 64,
        seq_len_min: 4000,
        seq_len_max: 4000,
        impressions_per_user: 10,
        ..SynthConfig::default()
    })
    .unwrap();
    let (_, semids) = quantize(&corpus, &QuantizerConfig::default(), 11).unwrap();
    let bucket = calibrate(&corpus, &SimilarityConfig::default(), 11).unwrap();
    let soft = bench_retrieval(&corpus, &semids, &bucket, Strategy::Soft, 50, 0).unwrap();
    let hard = bench_retrieval(&corpus, &semids, &bucket, Strategy::Hard, 50, 0).unwrap();
    let bytes = hard.bytes_touched as f64 / soft.bytes_touched as f64;
    let time = hard.p50_ns as f64 / soft.p50_ns as f64;
    Verdict::new(
        bytes < 0.1 && time < 0.1,
        format!(
            "N=4000, K_ret=50, {} queries: bytes {} vs {} ({:.1}%), p50 {} ns vs {} ns ({:.1}%)",
            soft.queries,
            hard.bytes_touched,
            soft.bytes_touched,
            100.0 * bytes,
            hard.p50_ns,
            soft.p50_ns,
            100.0 * time
        ),
    )
}

// ---------------------------------------------------------------------------
// 12. End-to-end determinism

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn end_to_end() -> Verdict {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.toml");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = Command::new(env!("CARGO_BIN_EXE_semrec"))
            .arg("--config")
            .arg(&config)
            .arg("--workdir")
            .arg(d.path())
            .arg("pipeline")
            .output()
            .unwrap();
        if !out.status.success() {
            return Verdict::new(
                false,
                format!("pipeline failed: {}", String::from_utf8_lossy(&out.stderr)),
            );
        }
    }
    // Benchmark timings are wall-clock measurements and excluded.
    let files: Vec<PathBuf> = files_under(dirs[0].path())
        .into_iter()
        .filter(|p| !p.starts_with("bench"))
        .collect();
    let other: Vec<PathBuf> = files_under(dirs[1].path())
        .into_iter()
        .filter(|p| !p.starts_with("bench"))
        .collect();
    let differing: Vec<String> = files
        .iter()
        .filter(|p| fs::read(dirs[0].path().join(p)).ok() != fs::read(dirs[1].path().join(p)).ok())
        .map(|p| p.display().to_string())
        .collect();
    let manifests = files.iter().filter(|p| p.ends_with("manifest.json")).count();
    let required = [
        "train/checkpoint.bin",
        "train/metrics.jsonl",
        "eval/eval.json",
        "analyze/mi/mi.jsonl",
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|r| !files.contains(&PathBuf::from(r)))
        .collect();
    Verdict::new(
        files == other && differing.is_empty() && missing.is_empty(),
        format!(
            "{} files, {manifests} manifests compared; differing {differing:?}; missing {missing:?}",
            files.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn report(id: usize, name: &str, start: Instant, v: Verdict) -> bool {
    println!(
        "criterion {id:>2} [{}] {name}: {} ({:.1}s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
    v.pass
}

type Check = (usize, &'static str, fn() -> Verdict);
type DeskCheck = (usize, &'static str, fn(&[SeedRun]) -> Verdict);

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut results = Vec::new();

    let simple: [Check; 5] = [
        (1, "gradient oracle", gradient_oracle),
        (2, "retrieval oracles", retrieval_oracles),
        (3, "bucketization", bucketization),
        (4, "quantizer", quantizer),
        (5, "attention invariants", attention),
    ];
    for (id, name, f) in simple {
        if wanted(id) {
            let t = Instant::now();
            results.push((id, report(id, name, t, f())));
        }
    }

    let desk: [DeskCheck; 5] = [
        (6, "learning signal", learning_signal),
        (7, "ablation ordering", ablation_ordering),
        (8, "information gain", information_gain_analogue),
        (9, "within-bucket dispersion", dispersion_analogue),
        (10, "MI discriminability", mi_discriminability),
    ];
    if desk.iter().any(|(id, ..)| wanted(*id)) {
        let t = Instant::now();
        println!("    desk-scale runs on seeds {SEEDS:?}");
        let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| desk_run(s)).collect();
        println!("    desk-scale runs done ({:.0}s)", t.elapsed().as_secs_f64());
        for (id, name, f) in desk {
            if wanted(id) {
                let t = Instant::now();
                results.push((id, report(id, name, t, f(&runs))));
            }
        }
    }

    let tail: [Check; 2] = [
        (11, "serving cost", serving_cost),
        (12, "end-to-end determinism", end_to_end),
    ];
    for (id, name, f) in tail {
        if wanted(id) {
            let t = Instant::now();
            results.push((id, report(id, name, t, f())));
        }
    }

    let failed: Vec<usize> = results.iter().filter(|(_, ok)| !ok).map(|(id, _)| *id).collect();
    println!(
        "acceptance: {} passed, {} failed {failed:?}",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
