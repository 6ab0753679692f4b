//! Run manifest: what each stage produced, with content hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use picl_core::util::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StageRecord {
    pub config_hash: String,
    pub artifacts: BTreeMap<String, Artifact>,
    pub counts: BTreeMap<String, serde_json::Value>,
    pub wall_clock_secs: f64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            stages: BTreeMap::new(),
        }
    }

    /// Load `run_dir/manifest.json`; a missing file yields `None`.
    pub fn load(run_dir: &Path) -> Result<Option<Self>, CliError> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::CorruptManifest { path, message: e.to_string() })
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), CliError> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    /// Artifact hashes of every stage, keyed `stage/artifact`.
    pub fn artifact_hashes(&self) -> BTreeMap<String, String> {
        self.stages
            .iter()
            .flat_map(|(s, r)| r.artifacts.iter().map(move |(a, art)| (format!("{s}/{a}"), art.sha256.clone())))
            .collect()
    }
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Builder for one stage's record.
pub struct StageOutput {
    run_dir: PathBuf,
    pub record: StageRecord,
}

impl StageOutput {
    pub fn new(run_dir: &Path, config_hash: &str) -> Self {
        Self {
            run_dir: run_dir.to_path_buf(),
            record: StageRecord {
                config_hash: config_hash.to_string(),
                ..Default::default()
            },
        }
    }

    /// Absolute path of an artifact file inside the run directory.
    pub fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    /// Record an already-written artifact.
    pub fn artifact(&mut self, name: &str, rel: &str) -> Result<(), CliError> {
        let sha256 = hash_file(&self.path(rel))?;
        self.record.artifacts.insert(
            name.to_string(),
            Artifact {
                path: rel.to_string(),
                sha256,
            },
        );
        Ok(())
    }

    pub fn count(&mut self, name: &str, value: impl Serialize) {
        self.record
            .counts
            .insert(name.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }
}
