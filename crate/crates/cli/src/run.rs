//! Run directories: one sub-directory per stage plus a manifest recording
//! what went in and what came out.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Regular files under `dir`, recursively, sorted by relative path.
fn files_under(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn rel_key(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Path of an upstream artifact, or a dependency error naming the
    /// command that produces it.
    pub fn require(&self, rel: &str, command: &'static str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Dependency { artifact: p, command })
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    versions: BTreeMap<&'static str, &'static str>,
    inputs: &'a BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    config: &'a ExperimentConfig,
}

/// Output directory of one command.
pub struct Stage {
    pub dir: PathBuf,
    root: PathBuf,
    command: String,
    inputs: BTreeMap<String, String>,
}

impl Stage {
    /// Creates (or empties) `<workspace>/<name>`.
    pub fn create(ws: &Workspace, name: &str, command: &str) -> Result<Self, CliError> {
        let dir = ws.root.join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            root: ws.root.clone(),
            command: command.into(),
            inputs: BTreeMap::new(),
        })
    }

    /// Records the hash of an input file, or of every file of an input directory.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let files = if path.is_dir() {
            files_under(path)?
        } else {
            vec![path.to_path_buf()]
        };
        for f in files {
            if f.file_name().is_some_and(|n| n == MANIFEST) {
                continue;
            }
            let key = if f.starts_with(&self.root) {
                rel_key(&self.root, &f)
            } else {
                format!(
                    "external:{}",
                    f.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
                )
            };
            self.inputs.insert(key, sha256_file(&f)?);
        }
        Ok(())
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn write(&self, file: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.path(file);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, bytes)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
        s.push('\n');
        self.write(file, s)
    }

    pub fn write_jsonl<T: Serialize>(&self, file: &str, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
        let mut s = String::new();
        for r in rows {
            s.push_str(&serde_json::to_string(&r).map_err(|e| CliError::Usage(e.to_string()))?);
            s.push('\n');
        }
        self.write(file, s)
    }

    /// Hashes every output file and writes the manifest.
    pub fn finish(self, cfg: &ExperimentConfig) -> Result<(), CliError> {
        let mut outputs = BTreeMap::new();
        for f in files_under(&self.dir)? {
            outputs.insert(rel_key(&self.dir, &f), sha256_file(&f)?);
        }
        let versions = BTreeMap::from([("semrec", env!("CARGO_PKG_VERSION")), ("manifest", "1")]);
        let m = Manifest {
            command: &self.command,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            versions,
            inputs: &self.inputs,
            outputs,
            config: cfg,
        };
        let mut s = serde_json::to_string_pretty(&m).map_err(|e| CliError::Usage(e.to_string()))?;
        s.push('\n');
        fs::write(self.dir.join(MANIFEST), s)?;
        Ok(())
    }
}
