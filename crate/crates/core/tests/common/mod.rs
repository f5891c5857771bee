#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semrec::data::{generate_synthetic, Corpus, SynthConfig};
use semrec::esu::{Ablation, EsuConfig, ExampleSet, FeatureTable, ModelParams};
use semrec::experiment::{
    calibrate, init_model, model_spec, quantize, retrieve_all, QuantizerConfig, SimilarityConfig,
};
use semrec::gsu::{GsuConfig, RetrievedSequence};
use semrec::quantizer::SemIdMap;

pub fn tiny_corpus(seed: u64) -> Corpus {
    generate_synthetic(&SynthConfig {
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
    .unwrap()
}

pub fn tiny_esu() -> EsuConfig {
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

pub struct Tiny {
    pub corpus: Corpus,
    pub semids: SemIdMap,
    pub retrieved: Vec<RetrievedSequence>,
    pub params: ModelParams,
    pub features: FeatureTable,
    pub set: ExampleSet,
}

/// A small model whose parameters are drawn from `U[-scale, scale]` so
/// attention is far from uniform and every path carries gradient.
pub fn tiny(ablation: Ablation, seed: u64, scale: f64) -> Tiny {
    let corpus = tiny_corpus(seed);
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
    let spec = model_spec(&tiny_esu(), ablation, corpus.meta(), 8, 4);
    let mut params = init_model(spec, Some(&semids), seed).unwrap();
    randomize(&mut params, scale, seed);
    let features = FeatureTable::build(&params, &corpus, Some(&semids)).unwrap();
    let set = ExampleSet::build(&params, &corpus, &retrieved).unwrap();
    Tiny {
        corpus,
        semids,
        retrieved,
        params,
        features,
        set,
    }
}

pub fn randomize(params: &mut ModelParams, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let hidden_biases: Vec<usize> = params.layout.mlp.iter().rev().skip(1).map(|&(_, b)| b).collect();
    for (i, t) in params.tensors.iter_mut().enumerate() {
        // Positive hidden biases keep the ReLUs alive.
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
