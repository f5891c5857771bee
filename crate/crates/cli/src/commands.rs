//! One function per subcommand. Each reads upstream artifacts from the
//! workspace and writes its own stage directory.

use std::fs;
use std::path::PathBuf;

use semrec::analysis::{
    bucket_sweep, cluster, dispersion_for, entropy, impression_groups, information_gain, interest_vectors,
    mutual_information, permutation_null, quantile, DiscreteJoint, Grouping,
};
use semrec::data::split;
use semrec::data::{generate_synthetic, load_corpus, save_corpus, Corpus};
use semrec::esu::{load_checkpoint, save_checkpoint, Ablation, CheckpointInfo, ModelParams};
use semrec::experiment::{calibrate, prepare_with, quantize, retrieve_all, train_model, Model, Prepared};
use semrec::gsu::{bench_retrieval, IndexSet, RetrievalTag, Strategy};
use semrec::quantizer::{load_semids, save_semids, SemIdMap};
use semrec::similarity::{BucketConfig, SimRange};
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::run::{Stage, Workspace};

type Result<T> = std::result::Result<T, CliError>;

const CORPUS: &str = "synth/corpus";
const SEMIDS: &str = "quantize/semids.jsonl";
const RANGE: &str = "retrieve/range.json";
const CHECKPOINT: &str = "train/checkpoint.bin";

fn corpus_dir(ws: &Workspace, cfg: &ExperimentConfig) -> Result<PathBuf> {
    match &cfg.corpus.path {
        Some(p) => Ok(p.clone()),
        None => ws.require(CORPUS, "synth"),
    }
}

fn load_inputs_corpus(ws: &Workspace, cfg: &ExperimentConfig, stage: &mut Stage) -> Result<Corpus> {
    let dir = corpus_dir(ws, cfg)?;
    stage.input(&dir)?;
    Ok(load_corpus(&dir)?)
}

fn load_inputs_semids(ws: &Workspace, stage: &mut Stage) -> Result<SemIdMap> {
    let p = ws.require(SEMIDS, "quantize")?;
    stage.input(&p)?;
    Ok(load_semids(&p)?)
}

fn load_inputs_range(ws: &Workspace, stage: &mut Stage) -> Result<SimRange> {
    let p = ws.require(RANGE, "retrieve")?;
    stage.input(&p)?;
    let range: SimRange =
        serde_json::from_slice(&fs::read(&p)?).map_err(|e| semrec::Error::Schema(format!("{}: {e}", p.display())))?;
    range.validate()?;
    Ok(range)
}

fn load_inputs_checkpoint(ws: &Workspace, stage: &mut Stage) -> Result<ModelParams> {
    let p = ws.require(CHECKPOINT, "train")?;
    stage.input(&p)?;
    Ok(load_checkpoint(&p)?.0)
}

/// Train/eval data rebuilt from the stored ids and range. Semantic ids are
/// loaded when `need_semids` or when hard retrieval is configured.
fn load_prepared(ws: &Workspace, cfg: &ExperimentConfig, stage: &mut Stage, need_semids: bool) -> Result<Prepared> {
    let semids = if need_semids || cfg.gsu.strategy == Strategy::Hard {
        Some(load_inputs_semids(ws, stage)?)
    } else {
        None
    };
    let range = load_inputs_range(ws, stage)?;
    let corpus = load_inputs_corpus(ws, cfg, stage)?;
    let bucket = BucketConfig::new(cfg.similarity.buckets, range)?;
    Ok(prepare_with(
        &corpus,
        &cfg.split,
        semids,
        cfg.quantizer.codebook_size,
        bucket,
        &cfg.gsu,
    )?)
}

pub fn synth(ws: &Workspace, cfg: &ExperimentConfig) -> Result<()> {
    let stage = Stage::create(ws, "synth", "synth")?;
    let corpus = generate_synthetic(&cfg.synth)?;
    save_corpus(&corpus, &stage.path("corpus"))?;
    let clicks = corpus.impressions().iter().filter(|i| i.label == 1).count();
    stage.write_json(
        "stats.json",
        &json!({
            "items": corpus.items().len(),
            "users": corpus.sequences().len(),
            "impressions": corpus.impressions().len(),
            "clicks": clicks,
        }),
    )?;
    eprintln!(
        "synth: {} items, {} users, {} impressions ({clicks} clicks)",
        corpus.items().len(),
        corpus.sequences().len(),
        corpus.impressions().len()
    );
    stage.finish(cfg)
}

pub fn quantize_cmd(ws: &Workspace, cfg: &ExperimentConfig) -> Result<()> {
    let mut stage = Stage::create(ws, "quantize", "quantize")?;
    let corpus = load_inputs_corpus(ws, cfg, &mut stage)?;
    let (codebooks, semids) = quantize(&corpus, &cfg.quantizer, cfg.seed)?;
    codebooks.save(&stage.path("codebooks.bin"))?;
    save_semids(&semids, &stage.path("semids.jsonl"))?;
    let distinct = semids.values().collect::<std::collections::BTreeSet<_>>().len();
    stage.write_json(
        "stats.json",
        &json!({ "level_mse": codebooks.level_mse, "distinct_ids": distinct }),
    )?;
    eprintln!(
        "quantize: per-level mse {:?}, {distinct} distinct ids",
        codebooks.level_mse
    );
    stage.finish(cfg)
}

#[derive(Serialize)]
struct IndexRecord<'a> {
    user_id: u64,
    events: usize,
    postings: Vec<(u32, &'a [u32])>,
}

pub fn index_build(ws: &Workspace, cfg: &ExperimentConfig) -> Result<()> {
    let mut stage = Stage::create(ws, "index", "index build")?;
    let semids = load_inputs_semids(ws, &mut stage)?;
    let corpus = load_inputs_corpus(ws, cfg, &mut stage)?;
    let set = IndexSet::build(&corpus, &semids)?;
    stage.write_jsonl(
        "index.jsonl",
        set.iter().map(|ix| IndexRecord {
            user_id: ix.user_id,
            events: ix.num_events(),
            postings: ix.postings().collect(),
        }),
    )?;
    let lists: usize = set.iter().map(|ix| ix.postings().count()).sum();
    stage.write_json(
        "stats.json",
        &json!({ "users": set.iter().count(), "posting_lists": lists, "index_bytes": set.memory_bytes() }),
    )?;
    eprintln!("index build: {lists} posting lists, {} bytes", set.memory_bytes());
    stage.finish(cfg)
}

pub fn retrieve(ws: &Workspace, cfg: &ExperimentConfig) -> Result<()> {
    let mut stage = Stage::create(ws, "retrieve", "retrieve")?;
    let semids = match cfg.gsu.strategy {
        Strategy::Hard => Some(load_inputs_semids(ws, &mut stage)?),
        Strategy::Soft => None,
    };
    let corpus = load_inputs_corpus(ws, cfg, &mut stage)?;
    let (train, eval) = split(&corpus, &cfg.split)?;
    let bucket = calibrate(&train, &cfg.similarity, cfg.seed)?;
    stage.write_json("range.json", &bucket.range)?;
    let seqs = retrieve_all(&eval, &cfg.gsu, &bucket, semids.as_ref())?;
    stage.write_jsonl(
        "retrieved.jsonl",
        eval.impressions().iter().zip(&seqs).map(|(imp, s)| {
            json!({
                "user_id": imp.user_id,
                "target_item_id": imp.target_item_id,
                "event_time": imp.event_time,
                "tag": s.tag,
                "events": s.events.iter().map(|e| json!({
                    "item_id": e.item_id,
                    "timestamp": e.timestamp,
                    "similarity": e.similarity,
                    "bucket": e.bucket,
                })).collect::<Vec<_>>(),
            })
        }),
    )?;
    let count = |t: RetrievalTag| seqs.iter().filter(|s| s.tag == t).count();
    let mean_len = seqs.iter().map(|s| s.len()).sum::<usize>() as f64 / seqs.len().max(1) as f64;
    stage.write_json(
        "stats.json",
        &json!({
            "eval_impressions": seqs.len(),
            "mean_length": mean_len,
            "soft": count(RetrievalTag::Soft),
            "hard": count(RetrievalTag::Hard),
            "fallback": count(RetrievalTag::Fallback),
        }),
    )?;
    eprintln!(
        "retrieve: range [{:.4}, {:.4}], {} eval sequences, mean length {mean_len:.1}",
        bucket.range.s_min,
        bucket.range.s_max,
        seqs.len()
    );
    stage.finish(cfg)
}

pub fn train(ws: &Workspace, cfg: &ExperimentConfig) -> Result<()> {
    let mut stage = Stage::create(ws, "train", "train")?;
    let data = load_prepared(ws, cfg, &mut stage, cfg.training.ablation.use_semid)?;
    let run = train_model(&data, &cfg.esu, &cfg.training)?;
    let info = CheckpointInfo {
        config_hash: cfg.hash(),
        seed: cfg.training.seed,
    };
    save_checkpoint(&run.model.params, &info, &stage.path("checkpoint.bin"))?;
    stage.write_jsonl("metrics.jsonl", &run.metrics)?;
    stage.write_json(
        "summary.json",
        &json!({
            "ablation": cfg.training.ablation.label(),
            "steps": run.metrics.len(),
            "train_impressions": data.train.impressions().len(),
            "eval_impressions": data.eval.impressions().len(),
            "eval_gauc": run.eval_gauc,
        }),
    )?;
    eprintln!("train: {} steps, eval GAUC {:.4}", run.metrics.len(), run.eval_gauc);
    stage.finish(cfg)
}

pub fn eval(ws: &Workspace, cfg: &ExperimentConfig) -> Result<()> {
    let mut stage = Stage::create(ws, "eval", "eval")?;
    let params = load_inputs_checkpoint(ws, &mut stage)?;
    let data = load_prepared(ws, cfg, &mut stage, params.spec.ablation.use_semid)?;
    let model = Model::with_params(&data, params)?;
    let gauc = model.eval_gauc()?;
    stage.write_json(
        "eval.json",
        &json!({ "eval_gauc": gauc, "impressions": model.eval_set.len(), "ablation": model.params.spec.ablation.label() }),
    )?;
    eprintln!("eval: GAUC {gauc:.4} on {} impressions", model.eval_set.len());
    stage.finish(cfg)
}

pub fn bench(ws: &Workspace, cfg: &ExperimentConfig) -> Result<()> {
    let mut stage = Stage::create(ws, "bench", "bench")?;
    let semids = load_inputs_semids(ws, &mut stage)?;
    let range = load_inputs_range(ws, &mut stage)?;
    let corpus = load_inputs_corpus(ws, cfg, &mut stage)?;
    let bucket = BucketConfig::new(cfg.similarity.buckets, range)?;
    let mut rows = Vec::new();
    for strategy in [Strategy::Soft, Strategy::Hard] {
        let r = bench_retrieval(&corpus, &semids, &bucket, strategy, cfg.gsu.k_ret, cfg.bench.queries)?;
        eprintln!(
            "bench {}: p50 {} ns, p99 {} ns, {} bytes/query, index {} bytes",
            r.strategy, r.p50_ns, r.p99_ns, r.bytes_touched, r.index_bytes
        );
        rows.push(r);
    }
    stage.write_jsonl("cost.jsonl", &rows)?;
    stage.finish(cfg)
}

#[derive(Serialize)]
struct MiRecord {
    model: String,
    trained: bool,
    clusters: usize,
    mi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    null_p99: Option<f64>,
}

fn mi_records(model: &Model, label: &str, trained: bool, cfg: &ExperimentConfig, null: bool) -> Result<Vec<MiRecord>> {
    let reps = interest_vectors(&model.params, &model.features, &model.eval_set, cfg.analysis.max_points)?;
    let labels = &model.eval_set.labels()[..reps.len()];
    let mut out = Vec::new();
    for &k in &cfg.analysis.clusters {
        let groups: Vec<u64> = cluster(&reps, k, cfg.seed)?.into_iter().map(|c| c as u64).collect();
        let mi = mutual_information(&DiscreteJoint::from_pairs(&groups, labels)?);
        let null_p99 = if null {
            Some(quantile(
                &permutation_null(&groups, labels, cfg.analysis.permutations, cfg.seed)?,
                0.99,
            ))
        } else {
            None
        };
        out.push(MiRecord {
            model: label.into(),
            trained,
            clusters: k,
            mi,
            null_p99,
        });
    }
    Ok(out)
}

pub fn analyze_mi(ws: &Workspace, cfg: &ExperimentConfig) -> Result<()> {
    let mut stage = Stage::create(ws, "analyze/mi", "analyze mi")?;
    let params = load_inputs_checkpoint(ws, &mut stage)?;
    let data = load_prepared(ws, cfg, &mut stage, true)?;
    let spec = params.spec.clone();
    let label = spec.ablation.label();
    let trained = Model::with_params(&data, params)?;
    let mut rows = mi_records(&trained, label, true, cfg, true)?;
    let untrained = Model::new(&data, &spec.esu, spec.ablation, cfg.training.seed)?;
    rows.extend(mi_records(&untrained, label, false, cfg, true)?);
    if cfg.analysis.mi_compare {
        for ab in [
            Ablation::FULL,
            Ablation::SIMBUCKET_SEMID,
            Ablation::SEMID,
            Ablation::SIMBUCKET,
            Ablation::BASE,
        ] {
            if ab == spec.ablation {
                continue;
            }
            let tcfg = semrec::training::TrainConfig {
                ablation: ab,
                ..cfg.training.clone()
            };
            let run = train_model(&data, &spec.esu, &tcfg)?;
            rows.extend(mi_records(&run.model, ab.label(), true, cfg, false)?);
        }
    }
    let mut table = String::from("model\ttrained\tclusters\tmi\tnull_p99\n");
    for r in &rows {
        let null = r.null_p99.map_or("-".to_string(), |v| format!("{v:.5}"));
        table.push_str(&format!(
            "{}\t{}\t{}\t{:.5}\t{null}\n",
            r.model, r.trained, r.clusters, r.mi
        ));
    }
    eprint!("{table}");
    stage.write("mi.txt", table)?;
    stage.write_jsonl("mi.jsonl", &rows)?;
    stage.finish(cfg)
}

pub fn analyze_gain(ws: &Workspace, cfg: &ExperimentConfig) -> Result<()> {
    let mut stage = Stage::create(ws, "analyze/gain", "analyze gain")?;
    let data = load_prepared(ws, cfg, &mut stage, true)?;
    let labels: Vec<u8> = data.eval.impressions().iter().map(|i| i.label).collect();
    let clicks = labels.iter().filter(|&&y| y == 1).count() as u64;
    let mut rows = Vec::new();
    for (name, g) in [
        ("semid_level1", Grouping::SemidLevel1),
        ("sim_bucket", Grouping::SimBucket),
    ] {
        let groups = impression_groups(&data.eval, &data.eval_retrieved, data.semids.as_ref(), &data.bucket, &g)?;
        let gain = information_gain(&groups, &labels)?;
        eprintln!("gain {name}: {gain:.5} nats");
        rows.push(json!({ "grouping": name, "gain_nats": gain }));
    }
    stage.write_json(
        "gain.json",
        &json!({
            "label_entropy_nats": entropy(&[labels.len() as u64 - clicks, clicks]),
            "impressions": labels.len(),
            "groupings": rows,
        }),
    )?;
    stage.finish(cfg)
}

pub fn analyze_dispersion(ws: &Workspace, cfg: &ExperimentConfig) -> Result<()> {
    let mut stage = Stage::create(ws, "analyze/dispersion", "analyze dispersion")?;
    let data = load_prepared(ws, cfg, &mut stage, true)?;
    let report = dispersion_for(&data, &cfg.analysis.dispersion)?;
    if let Some(d) = &report.diagnostic {
        eprintln!("dispersion: {d}");
    }
    let table = report.table();
    eprint!("{table}");
    stage.write("dispersion.txt", table)?;
    stage.write_json(
        "dispersion.json",
        &json!({ "report": report, "pooled_p_value": report.pooled_p_value() }),
    )?;
    stage.finish(cfg)
}

pub fn analyze_sweep(ws: &Workspace, cfg: &ExperimentConfig) -> Result<()> {
    let mut stage = Stage::create(ws, "analyze/sweep", "analyze sweep")?;
    let data = load_prepared(ws, cfg, &mut stage, cfg.training.ablation.use_semid)?;
    let curve = bucket_sweep(&data, &cfg.analysis.sweep_buckets, &cfg.esu, &cfg.training)?;
    for p in &curve {
        eprintln!("sweep B={}: GAUC {:.4}", p.buckets, p.eval_gauc);
    }
    stage.write_jsonl("sweep.jsonl", &curve)?;
    stage.finish(cfg)
}
