//! Per-directory `manifest.json`: who produced which files from which inputs.
//! Every file is referenced by its SHA-256, so a changed upstream artifact
//! changes every downstream manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::Task;
use crate::util::{sha256_hex, write_atomic};

use super::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub created: String,
    /// Workdir-relative path to hash.
    pub inputs: BTreeMap<String, String>,
    /// File name within the manifest's directory to hash.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub task: Task,
    pub annotator_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn new(dataset: &str, task: Task, annotator_id: &str, seed: u64) -> Self {
        Self {
            dataset: dataset.to_string(),
            task,
            annotator_id: annotator_id.to_string(),
            model: None,
            seed,
            chosen_k: None,
            prompt_hash: None,
            stages: BTreeMap::new(),
        }
    }

    /// `Ok(None)` when the directory has no manifest yet.
    pub fn read(dir: &Path) -> Result<Option<Self>, PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| PipelineError::Integrity(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(PipelineError::io(&path, e)),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, &pretty_json(self)).map_err(|e| PipelineError::io(&path, e))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.get(name)
    }
}

pub fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("manifest values serialize");
    bytes.push(b'\n');
    bytes
}

pub fn hash_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Re-hashes every output of `stage` under `dir`.
pub fn verify_outputs(dir: &Path, stage_name: &str, stage: &StageRecord) -> Result<(), PipelineError> {
    for (name, expected) in &stage.outputs {
        let path = dir.join(name);
        let actual = match fs::read(&path) {
            Ok(bytes) => sha256_hex(&bytes),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(PipelineError::Integrity(format!(
                    "{} listed by the {stage_name} manifest is missing",
                    path.display()
                )))
            }
            Err(e) => return Err(PipelineError::io(&path, e)),
        };
        if &actual != expected {
            return Err(PipelineError::Integrity(format!(
                "{} changed since the {stage_name} stage wrote it (sha256 {actual}, manifest {expected})",
                path.display()
            )));
        }
    }
    Ok(())
}
