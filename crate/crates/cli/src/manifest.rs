//! Run manifests: the effective config and output digests of one
//! invocation, written before the work starts and completed after.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    /// Effective `key = value` lines.
    pub config: Vec<String>,
    pub threads: usize,
    /// Value of `RUN_THREADS` at launch, if set.
    pub run_threads_env: Option<String>,
    pub rng: String,
    /// `running` until the outputs are digested, then `complete`.
    pub status: String,
    /// Output path to SHA-256 hex digest.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Lib(mdvit::Error::Format(format!("run manifest: {e}"))))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        mdvit::formats::write_bytes(path, self.to_json()?.as_bytes())?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Every regular file under `path` (or `path` itself), sorted.
pub fn files_under(path: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            out.extend(files_under(&e)?);
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(out)
}

/// Digests of every file under the given output paths.
pub fn digest_outputs(paths: &[PathBuf]) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        for f in files_under(p)? {
            out.insert(f.to_string_lossy().into_owned(), sha256_file(&f)?);
        }
    }
    Ok(out)
}

/// Describes how two digest maps differ, or `None` when they agree.
pub fn compare(recorded: &BTreeMap<String, String>, actual: &BTreeMap<String, String>) -> Option<String> {
    let mut problems = Vec::new();
    for (path, digest) in recorded {
        match actual.get(path) {
            None => problems.push(format!("{path} missing")),
            Some(d) if d != digest => problems.push(format!("{path} differs")),
            _ => {}
        }
    }
    for path in actual.keys().filter(|p| !recorded.contains_key(*p)) {
        problems.push(format!("{path} not recorded"));
    }
    if problems.is_empty() {
        None
    } else {
        Some(problems.join("; "))
    }
}
