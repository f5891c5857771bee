//! Composition of the pipeline stages used by the CLI and the experiments.

use serde::{Deserialize, Serialize};

use crate::data::{split, Corpus, CorpusMeta, SplitPolicy};
use crate::error::{Error, Result};
use crate::esu::{Ablation, EsuConfig, ExampleSet, FeatureTable, ModelParams, ModelSpec};
use crate::gsu::{retrieve_for_impression, GsuConfig, IndexSet, RetrievedSequence, Strategy};
use crate::quantizer::{train_codebooks, Codebooks, PrefixVocab, SemIdMap};
use crate::similarity::{bucketize, calibrate_range, BucketConfig, SimRange};
use crate::training::{evaluate, train, MetricRecord, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    pub levels: usize,
    pub codebook_size: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            codebook_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    pub buckets: usize,
    /// Behavior-target pairs sampled for range calibration.
    pub sample_size: usize,
    pub lo_percentile: f64,
    pub hi_percentile: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            buckets: 40,
            sample_size: 100_000,
            lo_percentile: 0.5,
            hi_percentile: 99.5,
        }
    }
}

/// Trains the residual codebooks on the catalog and encodes every item.
pub fn quantize(corpus: &Corpus, cfg: &QuantizerConfig, seed: u64) -> Result<(Codebooks, SemIdMap)> {
    let cb = train_codebooks(corpus.items(), cfg.levels, cfg.codebook_size, seed)?;
    let ids = cb.encode_items(corpus.items())?;
    Ok((cb, ids))
}

/// Calibrates the similarity range on the impressions of `corpus`.
pub fn calibrate(corpus: &Corpus, cfg: &SimilarityConfig, seed: u64) -> Result<BucketConfig> {
    let range = calibrate_range(corpus, cfg.sample_size, cfg.lo_percentile, cfg.hi_percentile, seed)?;
    BucketConfig::new(cfg.buckets, range)
}

/// Runs retrieval for every impression of `corpus`.
pub fn retrieve_all(
    corpus: &Corpus,
    gsu: &GsuConfig,
    bucket: &BucketConfig,
    semids: Option<&SemIdMap>,
) -> Result<Vec<RetrievedSequence>> {
    let indexes = match gsu.strategy {
        Strategy::Hard => {
            let ids = semids.ok_or_else(|| Error::Config("hard retrieval needs semantic ids".into()))?;
            Some(IndexSet::build(corpus, ids)?)
        }
        Strategy::Soft => None,
    };
    (0..corpus.impressions().len())
        .map(|n| retrieve_for_impression(corpus, n, gsu, bucket, semids, indexes.as_ref()))
        .collect()
}

/// Reassigns bucket indices under a different bucket configuration.
pub fn rebucket(seqs: &[RetrievedSequence], cfg: &BucketConfig) -> Vec<RetrievedSequence> {
    seqs.iter()
        .map(|s| {
            let mut s = s.clone();
            for e in &mut s.events {
                e.bucket = bucketize(e.similarity, cfg);
            }
            s
        })
        .collect()
}

pub fn model_spec(
    esu: &EsuConfig,
    ablation: Ablation,
    meta: &CorpusMeta,
    buckets: usize,
    codebook_size: usize,
) -> ModelSpec {
    ModelSpec {
        esu: esu.clone(),
        ablation,
        id_vocab: meta.id_vocab.clone(),
        user_vocab: meta.user_vocab.clone(),
        context_vocab: meta.context_vocab.clone(),
        buckets,
        codebook_size,
    }
}

/// Freshly initialized parameters for `spec`; the prefix vocabulary covers
/// every catalog item's prefixes.
pub fn init_model(spec: ModelSpec, semids: Option<&SemIdMap>, seed: u64) -> Result<ModelParams> {
    let vocab = if spec.ablation.use_semid {
        let ids = semids.ok_or_else(|| Error::Config("use_semid is on but no semantic ids were given".into()))?;
        PrefixVocab::build(ids.values(), spec.esu.prefix_depth, spec.codebook_size)?
    } else {
        PrefixVocab::default()
    };
    ModelParams::init(spec, vocab, seed)
}

/// Train/eval corpora with their retrieval results, shared by all models
/// trained on them.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Corpus,
    pub eval: Corpus,
    pub semids: Option<SemIdMap>,
    pub codebook_size: usize,
    pub bucket: BucketConfig,
    pub train_retrieved: Vec<RetrievedSequence>,
    pub eval_retrieved: Vec<RetrievedSequence>,
}

/// Settings for [`prepare`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub split: SplitPolicy,
    pub quantizer: QuantizerConfig,
    pub similarity: SimilarityConfig,
    pub gsu: GsuConfig,
}

/// Split, quantize, calibrate on train, retrieve for both sides.
pub fn prepare(corpus: &Corpus, cfg: &PrepareConfig, seed: u64) -> Result<Prepared> {
    let (train, _) = split(corpus, &cfg.split)?;
    let (_, semids) = quantize(corpus, &cfg.quantizer, seed)?;
    let bucket = calibrate(&train, &cfg.similarity, seed)?;
    prepare_with(
        corpus,
        &cfg.split,
        Some(semids),
        cfg.quantizer.codebook_size,
        bucket,
        &cfg.gsu,
    )
}

/// Split and retrieve with already-trained semantic ids and a calibrated range.
pub fn prepare_with(
    corpus: &Corpus,
    policy: &SplitPolicy,
    semids: Option<SemIdMap>,
    codebook_size: usize,
    bucket: BucketConfig,
    gsu: &GsuConfig,
) -> Result<Prepared> {
    let (train, eval) = split(corpus, policy)?;
    let train_retrieved = retrieve_all(&train, gsu, &bucket, semids.as_ref())?;
    let eval_retrieved = retrieve_all(&eval, gsu, &bucket, semids.as_ref())?;
    Ok(Prepared {
        train,
        eval,
        semids,
        codebook_size,
        bucket,
        train_retrieved,
        eval_retrieved,
    })
}

impl Prepared {
    /// Same data with `buckets` equal-width buckets over the calibrated range.
    pub fn with_buckets(&self, buckets: usize) -> Result<Prepared> {
        let bucket = BucketConfig::new(buckets, self.bucket.range)?;
        Ok(Prepared {
            train_retrieved: rebucket(&self.train_retrieved, &bucket),
            eval_retrieved: rebucket(&self.eval_retrieved, &bucket),
            bucket,
            ..self.clone()
        })
    }

    pub fn range(&self) -> SimRange {
        self.bucket.range
    }
}

/// A model ready to train or evaluate on a [`Prepared`] dataset.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ModelParams,
    pub features: FeatureTable,
    pub train_set: ExampleSet,
    pub eval_set: ExampleSet,
}

impl Model {
    pub fn new(data: &Prepared, esu: &EsuConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        let spec = model_spec(
            esu,
            ablation,
            data.train.meta(),
            data.bucket.buckets,
            data.codebook_size,
        );
        let params = init_model(spec, data.semids.as_ref(), seed)?;
        Self::with_params(data, params)
    }

    pub fn with_params(data: &Prepared, params: ModelParams) -> Result<Self> {
        let features = FeatureTable::build(&params, &data.train, data.semids.as_ref())?;
        let train_set = ExampleSet::build(&params, &data.train, &data.train_retrieved)?;
        let eval_set = ExampleSet::build(&params, &data.eval, &data.eval_retrieved)?;
        Ok(Self {
            params,
            features,
            train_set,
            eval_set,
        })
    }

    pub fn eval_gauc(&self) -> Result<f64> {
        evaluate(&self.params, &self.features, &self.eval_set)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub metrics: Vec<MetricRecord>,
    pub eval_gauc: f64,
}

/// Initializes with `tcfg.seed`, trains, and reports eval GAUC.
pub fn train_model(data: &Prepared, esu: &EsuConfig, tcfg: &TrainConfig) -> Result<TrainedModel> {
    let mut model = Model::new(data, esu, tcfg.ablation, tcfg.seed)?;
    let out = train(
        model.params.clone(),
        &model.features,
        &model.train_set,
        Some(&model.eval_set),
        tcfg,
    )?;
    model.params = out.params;
    let eval_gauc = match out.metrics.last().and_then(|m| m.eval_gauc) {
        Some(g) => g,
        None => model.eval_gauc()?,
    };
    Ok(TrainedModel {
        model,
        metrics: out.metrics,
        eval_gauc,
    })
}
