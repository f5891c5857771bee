use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelParams, ModelSpec};
use crate::error::{Error, Result};
use crate::quantizer::PrefixVocab;
use crate::tensor::TensorKind;

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u32 = 1;

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
    kind: TensorKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    info: CheckpointInfo,
    spec: ModelSpec,
    prefix_keys: Vec<u64>,
    tensors: Vec<TensorHeader>,
}

/// Layout: magic, version (u32 LE), header length (u64 LE), JSON header,
/// then every tensor's values as little-endian f64 in header order.
pub fn write_checkpoint(params: &ModelParams, info: &CheckpointInfo, w: &mut impl Write) -> Result<()> {
    let header = Header {
        info: info.clone(),
        spec: params.spec.clone(),
        prefix_keys: params.prefix_vocab.keys().collect(),
        tensors: params
            .tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                rows: t.rows,
                cols: t.cols,
                kind: t.kind,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in &params.tensors {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(ModelParams, CheckpointInfo)> {
    let bad = |m: &str| Error::Schema(format!("checkpoint: {m}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != VERSION {
        return Err(bad("unsupported version"));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = usize::try_from(u64::from_le_bytes(b8)).map_err(|_| bad("header too large"))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(&e.to_string()))?;
    let mut params = ModelParams::zeros(header.spec, PrefixVocab::from_keys(header.prefix_keys))?;
    if header.tensors.len() != params.tensors.len() {
        return Err(bad("tensor count does not match the model spec"));
    }
    for (t, h) in params.tensors.iter_mut().zip(&header.tensors) {
        if t.name != h.name || t.rows != h.rows || t.cols != h.cols || t.kind != h.kind {
            return Err(bad(&format!("tensor {} does not match the model spec", h.name)));
        }
        for v in t.data.iter_mut() {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
    }
    if r.read(&mut b4)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok((params, header.info))
}

pub fn save_checkpoint(params: &ModelParams, info: &CheckpointInfo, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, info, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointInfo)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
