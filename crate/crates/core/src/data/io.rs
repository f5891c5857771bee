use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{BehaviorEvent, BehaviorSequence, Corpus, CorpusMeta, Impression, ItemRecord};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const SEQUENCES_FILE: &str = "sequences.jsonl";
pub const IMPRESSIONS_FILE: &str = "impressions.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemLine {
    item_id: u64,
    id_features: Vec<u32>,
    /// Little-endian f32, base64.
    embedding: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceLine {
    user_id: u64,
    events: Vec<(u64, i64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImpressionLine {
    user_id: u64,
    target_item_id: u64,
    context: Vec<u32>,
    user_features: Vec<u32>,
    label: u8,
    event_time: i64,
}

pub(crate) fn encode_f32(v: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

pub(crate) fn decode_f32(s: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = B64.decode(s).map_err(|e| format!("bad base64 embedding: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("embedding byte length {} is not a multiple of 4", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_lines<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| Error::Internal(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let name = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: name.clone(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push((n + 1, row));
    }
    Ok(out)
}

/// Writes the four corpus files into `dir`, creating it if needed.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = serde_json::to_string_pretty(corpus.meta()).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(dir.join(META_FILE), meta + "\n")?;
    write_lines(
        &dir.join(ITEMS_FILE),
        corpus.items().iter().map(|it| ItemLine {
            item_id: it.item_id,
            id_features: it.id_features.clone(),
            embedding: encode_f32(&it.mm_embedding),
        }),
    )?;
    write_lines(
        &dir.join(SEQUENCES_FILE),
        corpus.sequences().iter().map(|s| SequenceLine {
            user_id: s.user_id,
            events: s.events.iter().map(|e| (e.item_id, e.timestamp)).collect(),
        }),
    )?;
    write_lines(
        &dir.join(IMPRESSIONS_FILE),
        corpus.impressions().iter().map(|i| ImpressionLine {
            user_id: i.user_id,
            target_item_id: i.target_item_id,
            context: i.context_features.clone(),
            user_features: i.user_features.clone(),
            label: i.label,
            event_time: i.event_time,
        }),
    )
}

/// Reads and validates a corpus directory.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path)?;
    let meta: CorpusMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
        file: meta_path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;

    let items_path = dir.join(ITEMS_FILE);
    let mut items = Vec::new();
    for (line, row) in read_lines::<ItemLine>(&items_path)? {
        let emb = decode_f32(&row.embedding).map_err(|msg| Error::Parse {
            file: items_path.display().to_string(),
            line,
            msg,
        })?;
        if emb.len() != meta.dim {
            return Err(Error::Schema(format!(
                "{}:{line}: item {} has embedding dimension {} but meta declares {}",
                items_path.display(),
                row.item_id,
                emb.len(),
                meta.dim
            )));
        }
        items.push(ItemRecord {
            item_id: row.item_id,
            id_features: row.id_features,
            mm_embedding: emb,
        });
    }

    let sequences = read_lines::<SequenceLine>(&dir.join(SEQUENCES_FILE))?
        .into_iter()
        .map(|(_, s)| BehaviorSequence {
            user_id: s.user_id,
            events: s
                .events
                .into_iter()
                .map(|(item_id, timestamp)| BehaviorEvent { item_id, timestamp })
                .collect(),
        })
        .collect();

    let impressions = read_lines::<ImpressionLine>(&dir.join(IMPRESSIONS_FILE))?
        .into_iter()
        .map(|(_, i)| Impression {
            user_id: i.user_id,
            target_item_id: i.target_item_id,
            context_features: i.context,
            user_features: i.user_features,
            label: i.label,
            event_time: i.event_time,
        })
        .collect();

    Corpus::validated(meta, items, sequences, impressions)
}
