use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{l2_norm, BehaviorEvent, BehaviorSequence, Corpus, CorpusMeta, Impression, ItemRecord};
use crate::error::{Error, Result};
use crate::similarity::cosine_with_norms;

/// Parameters of the synthetic corpus.
///
/// Click labels follow a logistic model with a similarity term and a
/// cluster-affinity term:
///
/// `P(click) = sigmoid(bias + w_sim * s + w_affinity * A[g_b, g_t] + noise)`
///
/// where `s` is the cosine between the target and the visible behavior most
/// similar to it (ties to the most recent), `g_b` is that behavior's planted
/// cluster, `g_t` the target's cluster and `A` a random affinity matrix with
/// a per-target-cluster popularity component. With `w_affinity = 0` the label
/// depends on similarity alone; any positive weight plants CTR differences
/// between clusters at equal similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub dim: usize,
    /// Expected L2 norm of the per-item perturbation around its unit-norm cluster center.
    pub cluster_noise: f64,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub impressions_per_user: usize,
    pub interests_per_user: usize,
    /// Share of history events drawn from the user's dominant interest.
    pub dominant_share: f64,
    /// Probability that a target is drawn from the user's interests instead of uniformly.
    pub interest_target_prob: f64,
    pub n_categories: u32,
    pub user_vocab: Vec<u32>,
    pub context_vocab: Vec<u32>,
    pub bias: f64,
    pub w_sim: f64,
    pub w_affinity: f64,
    pub noise_std: f64,
    pub popularity_std: f64,
    pub pair_std: f64,
    /// History timestamps are drawn from `[0, horizon)`.
    pub horizon: i64,
    /// Impressions happen in `[impression_start * horizon, horizon]`.
    pub impression_start: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_users: 200,
            n_items: 2000,
            n_clusters: 16,
            dim: 128,
            cluster_noise: 0.6,
            seq_len_min: 50,
            seq_len_max: 200,
            impressions_per_user: 20,
            interests_per_user: 3,
            dominant_share: 0.6,
            interest_target_prob: 0.5,
            n_categories: 4,
            user_vocab: vec![8, 2],
            context_vocab: vec![4],
            bias: -1.5,
            w_sim: 3.0,
            w_affinity: 1.5,
            noise_std: 0.3,
            popularity_std: 1.0,
            pair_std: 0.5,
            horizon: 1_000_000,
            impression_start: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_users == 0 || self.n_items == 0 {
            return bad("n_users and n_items must be positive");
        }
        if self.n_clusters < 2 {
            return bad("n_clusters must be at least 2");
        }
        if self.n_items < self.n_clusters {
            return bad("n_items must be at least n_clusters");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.seq_len_min > self.seq_len_max {
            return bad("seq_len_min exceeds seq_len_max");
        }
        if self.interests_per_user == 0 || self.interests_per_user > self.n_clusters {
            return bad("interests_per_user must be in 1..=n_clusters");
        }
        if self.n_categories == 0 {
            return bad("n_categories must be positive");
        }
        for (name, p) in [
            ("dominant_share", self.dominant_share),
            ("interest_target_prob", self.interest_target_prob),
            ("impression_start", self.impression_start),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        if self.horizon <= 0 {
            return bad("horizon must be positive");
        }
        if self.user_vocab.iter().chain(&self.context_vocab).any(|&v| v == 0) {
            return bad("vocabulary sizes must be positive");
        }
        Ok(())
    }
}

/// Ground truth kept alongside a synthetic corpus, for tests and analyses.
#[derive(Debug, Clone)]
pub struct PlantedTruth {
    /// Planted cluster of each item (by dense item position).
    pub item_cluster: Vec<usize>,
    /// Noise-free logit of each impression.
    pub logit: Vec<f64>,
    /// Max cosine between the target and the visible history (0 if empty).
    pub max_similarity: Vec<f64>,
    /// Affinity matrix, row = behavior cluster, column = target cluster.
    pub affinity: Vec<Vec<f64>>,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    generate_synthetic_with_truth(cfg).map(|(c, _)| c)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

pub fn generate_synthetic_with_truth(cfg: &SynthConfig) -> Result<(Corpus, PlantedTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = cfg.n_clusters;
    let d = cfg.dim;

    let centers: Vec<Vec<f64>> = (0..g)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();

    let scale = cfg.cluster_noise / (d as f64).sqrt();
    let mut items = Vec::with_capacity(cfg.n_items);
    let mut item_cluster = Vec::with_capacity(cfg.n_items);
    let mut by_cluster = vec![Vec::new(); g];
    for i in 0..cfg.n_items {
        let c = i % g;
        let emb: Vec<f32> = centers[c]
            .iter()
            .map(|&x| (x + scale * normal(&mut rng)) as f32)
            .collect();
        let category = (c as u64 * cfg.n_categories as u64 / g as u64) as u32;
        items.push(ItemRecord {
            item_id: i as u64 + 1,
            id_features: vec![i as u32, category],
            mm_embedding: emb,
        });
        item_cluster.push(c);
        by_cluster[c].push(i);
    }
    let norms: Vec<f64> = items.iter().map(|it| l2_norm(&it.mm_embedding)).collect();
    let cos = |a: usize, b: usize| -> f64 {
        cosine_with_norms(&items[a].mm_embedding, norms[a], &items[b].mm_embedding, norms[b])
    };

    let popularity: Vec<f64> = (0..g).map(|_| cfg.popularity_std * normal(&mut rng)).collect();
    let affinity: Vec<Vec<f64>> = (0..g)
        .map(|_| {
            (0..g)
                .map(|h| popularity[h] + cfg.pair_std * normal(&mut rng))
                .collect()
        })
        .collect();

    let start = (cfg.impression_start * cfg.horizon as f64) as i64;
    let mut sequences = Vec::with_capacity(cfg.n_users);
    let mut impressions = Vec::with_capacity(cfg.n_users * cfg.impressions_per_user);
    let mut logit = Vec::with_capacity(impressions.capacity());
    let mut max_similarity = Vec::with_capacity(impressions.capacity());
    let mut clusters: Vec<usize> = (0..g).collect();

    for u in 0..cfg.n_users {
        let user_id = u as u64 + 1;
        clusters.shuffle(&mut rng);
        let interests = clusters[..cfg.interests_per_user].to_vec();
        let pick_interest = |rng: &mut ChaCha8Rng| -> usize {
            if interests.len() == 1 || rng.random::<f64>() < cfg.dominant_share {
                interests[0]
            } else {
                interests[1 + rng.random_range(0..interests.len() - 1)]
            }
        };
        let user_features: Vec<u32> = cfg.user_vocab.iter().map(|&v| rng.random_range(0..v)).collect();

        let n_events = rng.random_range(cfg.seq_len_min..=cfg.seq_len_max);
        let mut times: Vec<i64> = (0..n_events).map(|_| rng.random_range(0..cfg.horizon)).collect();
        times.sort_unstable();
        let mut history = Vec::with_capacity(n_events);
        for &t in &times {
            let c = pick_interest(&mut rng);
            let item = by_cluster[c][rng.random_range(0..by_cluster[c].len())];
            history.push((item, t));
        }

        for _ in 0..cfg.impressions_per_user {
            let event_time = rng.random_range(start..=cfg.horizon);
            let context_features: Vec<u32> = cfg.context_vocab.iter().map(|&v| rng.random_range(0..v)).collect();
            let tc = if rng.random::<f64>() < cfg.interest_target_prob {
                pick_interest(&mut rng)
            } else {
                rng.random_range(0..g)
            };
            let target = by_cluster[tc][rng.random_range(0..by_cluster[tc].len())];

            let mut best: Option<(f64, usize)> = None;
            for &(item, _) in history.iter().take_while(|(_, t)| *t < event_time) {
                let s = cos(item, target);
                // `>=` keeps the most recent behavior on ties.
                if best.is_none_or(|(bs, _)| s >= bs) {
                    best = Some((s, item));
                }
            }
            let (s, aff) = match best {
                Some((s, item)) => (s, affinity[item_cluster[item]][tc]),
                None => (0.0, 0.0),
            };
            let z = cfg.bias + cfg.w_sim * s + cfg.w_affinity * aff;
            let p = 1.0 / (1.0 + (-(z + cfg.noise_std * normal(&mut rng))).exp());
            let label = u8::from(rng.random::<f64>() < p);
            impressions.push(Impression {
                user_id,
                target_item_id: items[target].item_id,
                context_features,
                user_features: user_features.clone(),
                label,
                event_time,
            });
            logit.push(z);
            max_similarity.push(s);
        }

        sequences.push(BehaviorSequence {
            user_id,
            events: history
                .iter()
                .map(|&(item, t)| BehaviorEvent {
                    item_id: items[item].item_id,
                    timestamp: t,
                })
                .collect(),
        });
    }

    let meta = CorpusMeta {
        dim: d,
        id_vocab: vec![cfg.n_items as u32, cfg.n_categories],
        user_vocab: cfg.user_vocab.clone(),
        context_vocab: cfg.context_vocab.clone(),
        seed: Some(cfg.seed),
        n_items: 0,
        n_users: 0,
        n_impressions: 0,
    };
    let corpus = Corpus::new(meta, items, sequences, impressions)?;
    Ok((
        corpus,
        PlantedTruth {
            item_cluster,
            logit,
            max_similarity,
            affinity,
        },
    ))
}
