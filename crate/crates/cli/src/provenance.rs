//! Per-run provenance: what was run, with which settings, and what it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{CliConfig, Override};

pub const PROVENANCE_FILE: &str = "provenance.json";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub run_id: String,
    pub command: String,
    pub argv: Vec<String>,
    pub code_version: String,
    pub seed: u64,
    pub overrides: Vec<Override>,
    /// Path relative to the run directory -> sha256 hex.
    pub outputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

static COUNTER: AtomicU64 = AtomicU64::new(0);

/// `<unix seconds>-<pid>-<random>`: unique per invocation, never used as a seed.
pub fn new_run_id() -> String {
    let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    let mut h = Sha256::new();
    h.update(t.as_nanos().to_le_bytes());
    h.update(std::process::id().to_le_bytes());
    h.update(COUNTER.fetch_add(1, Ordering::Relaxed).to_le_bytes());
    format!("{}-{}-{}", t.as_secs(), std::process::id(), &hex::encode(h.finalize())[..8])
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect(&p, root, out)?;
        } else if p.file_name().is_some_and(|n| n != PROVENANCE_FILE) {
            out.push(p.strip_prefix(root).expect("inside root").to_path_buf());
        }
    }
    Ok(())
}

/// Digests every file under `dir` except the provenance record itself.
pub fn digest_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files
        .into_iter()
        .map(|rel| {
            let d = sha256_file(&dir.join(&rel))?;
            Ok((rel.to_string_lossy().replace('\\', "/"), d))
        })
        .collect()
}

impl Provenance {
    pub fn new(run_id: &str, command: &str, config: &CliConfig, seed: u64, overrides: &[Override]) -> Result<Self> {
        Ok(Self {
            run_id: run_id.to_string(),
            command: command.to_string(),
            argv: std::env::args().collect(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            overrides: overrides.to_vec(),
            outputs: BTreeMap::new(),
            config: serde_json::to_value(config)?,
        })
    }

    /// Writes the config snapshot, digests the run directory and writes
    /// `provenance.json` last.
    pub fn finish(mut self, dir: &Path, config: &CliConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_SNAPSHOT_FILE), config.to_toml()?)?;
        self.outputs = digest_tree(dir)?;
        let path = dir.join(PROVENANCE_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(self)
    }
}
