//! Experiment configuration: TOML file, dotted-key overrides, validation.

use std::path::{Path, PathBuf};

use semrec::analysis::DispersionConfig;
use semrec::data::{SplitPolicy, SynthConfig};
use semrec::esu::EsuConfig;
use semrec::experiment::{QuantizerConfig, SimilarityConfig};
use semrec::gsu::GsuConfig;
use semrec::quantizer::pack_prefix;
use semrec::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSource {
    /// Directory of an existing corpus; when unset the `synth` output is used.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub clusters: Vec<usize>,
    /// Eval impressions used for representation clustering.
    pub max_points: usize,
    pub permutations: usize,
    /// Also train the ablation variants on the same seed for `analyze mi`.
    pub mi_compare: bool,
    pub dispersion: DispersionConfig,
    pub sweep_buckets: Vec<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            clusters: vec![8, 32, 128],
            max_points: 20_000,
            permutations: 200,
            mi_compare: true,
            dispersion: DispersionConfig::default(),
            sweep_buckets: vec![10, 20, 40, 80],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Queries per strategy (0: every impression).
    pub queries: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { queries: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds quantization, range calibration and the analyses.
    pub seed: u64,
    pub corpus: CorpusSource,
    pub synth: SynthConfig,
    pub split: SplitPolicy,
    pub quantizer: QuantizerConfig,
    pub similarity: SimilarityConfig,
    pub gsu: GsuConfig,
    pub esu: EsuConfig,
    pub training: TrainConfig,
    pub analysis: AnalysisConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            seed: 7,
            corpus: CorpusSource::default(),
            esu: EsuConfig {
                user_widths: vec![4; synth.user_vocab.len()],
                context_widths: vec![4; synth.context_vocab.len()],
                ..EsuConfig::default()
            },
            synth,
            split: SplitPolicy::default(),
            quantizer: QuantizerConfig::default(),
            similarity: SimilarityConfig::default(),
            gsu: GsuConfig::default(),
            training: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Number of id features on every synthetic item.
const SYNTH_ID_SLOTS: usize = 2;

impl ExperimentConfig {
    /// Reads `path` (if any), applies `key=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse().map_err(|e: toml::de::Error| CliError::Config {
                    path: p.display().to_string(),
                    msg: e.message().to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig =
            serde_path_to_error::deserialize(toml::Value::Table(doc)).map_err(|e| CliError::Config {
                path: e.path().to_string(),
                msg: e.inner().message().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-module checks that can be made before touching any data.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |path: &str, msg: String| Err(CliError::Config { path: path.into(), msg });
        let ab = self.training.ablation;
        self.training.validate().map_err(|e| CliError::Config {
            path: "training".into(),
            msg: e.to_string(),
        })?;
        if self.corpus.path.is_none() {
            self.synth.validate().map_err(|e| CliError::Config {
                path: "synth".into(),
                msg: e.to_string(),
            })?;
            if self.esu.id_widths.len() != SYNTH_ID_SLOTS {
                return bad(
                    "esu.id_widths",
                    format!("synthetic items have {SYNTH_ID_SLOTS} id features"),
                );
            }
            if self.esu.user_widths.len() != self.synth.user_vocab.len() {
                return bad(
                    "esu.user_widths",
                    format!("synth.user_vocab has {} slots", self.synth.user_vocab.len()),
                );
            }
            if self.esu.context_widths.len() != self.synth.context_vocab.len() {
                return bad(
                    "esu.context_widths",
                    format!("synth.context_vocab has {} slots", self.synth.context_vocab.len()),
                );
            }
        }
        if self.quantizer.levels == 0 || self.quantizer.codebook_size == 0 {
            return bad("quantizer", "levels and codebook_size must be positive".into());
        }
        if ab.use_semid {
            if self.esu.prefix_depth == 0 || self.esu.prefix_depth > self.quantizer.levels {
                return bad("esu.prefix_depth", format!("must be in 1..={}", self.quantizer.levels));
            }
            let max = vec![self.quantizer.codebook_size as u32 - 1; self.esu.prefix_depth];
            if let Err(e) = pack_prefix(&max, self.quantizer.codebook_size) {
                return bad("esu.prefix_depth", e.to_string());
            }
        }
        if self.similarity.buckets == 0 || self.similarity.buckets > u16::MAX as usize {
            return bad("similarity.buckets", "must be in 1..=65535".into());
        }
        let pct = 0.0..=100.0;
        if !pct.contains(&self.similarity.lo_percentile)
            || !pct.contains(&self.similarity.hi_percentile)
            || self.similarity.lo_percentile >= self.similarity.hi_percentile
        {
            return bad("similarity", "need 0 <= lo_percentile < hi_percentile <= 100".into());
        }
        if self.gsu.k_ret == 0 {
            return bad("gsu.k_ret", "must be at least 1".into());
        }
        if self.esu.heads == 0 || self.esu.head_dim == 0 {
            return bad("esu", "heads and head_dim must be positive".into());
        }
        if self.esu.mlp_hidden.contains(&0) {
            return bad("esu.mlp_hidden", "hidden widths must be positive".into());
        }
        if ab.use_simbucket && self.esu.bucket_width == 0 {
            return bad("esu.bucket_width", "must be positive when use_simbucket is on".into());
        }
        if self.analysis.clusters.is_empty() || self.analysis.clusters.contains(&0) {
            return bad("analysis.clusters", "need at least one positive cluster count".into());
        }
        if self.analysis.sweep_buckets.contains(&0) {
            return bad("analysis.sweep_buckets", "bucket counts must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Sets `a.b.c = value`, parsing the value as TOML and falling back to a
/// plain string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{key}`")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| CliError::Config {
            path: key.into(),
            msg: format!("`{p}` is not a table"),
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
