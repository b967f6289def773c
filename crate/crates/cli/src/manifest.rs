//! Append-only JSON-lines run manifests.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use sdd::Result;

pub const BUILD_ID: &str = concat!("sdd-cli/", env!("CARGO_PKG_VERSION"));

/// One record per command run. `args` is the full command line, so
/// re-running it reproduces the listed artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub build: String,
    pub config: Value,
    /// 64-bit FNV-1a of the input dataset, as 16 hex digits.
    pub dataset_fingerprint: Option<String>,
    pub artifacts: Vec<PathBuf>,
}

pub fn fingerprint_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

/// Explicit path, or `manifest.jsonl` in the directory of `primary`.
pub fn manifest_path(explicit: Option<&Path>, primary: &Path) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => primary
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join("manifest.jsonl"),
    }
}

pub fn append(path: &Path, record: &RunManifest) -> Result<()> {
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}
