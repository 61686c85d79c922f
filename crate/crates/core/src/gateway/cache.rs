use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ChatRequest, GatewayError, Usage};
use crate::util::{sha256_hex, write_atomic};

/// SHA-256 over the canonical JSON of model, messages, temperature and
/// output-token budget.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn for_request(request: &ChatRequest) -> Self {
        CacheKey(sha256_hex(&key_material(request)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn key_material(request: &ChatRequest) -> Vec<u8> {
    serde_json::to_vec(&json!({
        "model": request.model,
        "messages": request.messages,
        "temperature": request.temperature,
        "max_output_tokens": request.max_tokens,
    }))
    .expect("request serializes")
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    request: ChatRequest,
    text: String,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedResponse {
    pub text: String,
    pub usage: Option<Usage>,
}

/// Content-addressed response store laid out as `<root>/<2 hex>/<key>.json`.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.root.join(&key.0[..2]).join(format!("{}.json", key.0))
    }

    /// `Ok(None)` on a miss. A stored entry whose request differs from
    /// `request` is reported as corruption.
    pub fn get(&self, key: &CacheKey, request: &ChatRequest) -> Result<Option<CachedResponse>, GatewayError> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(GatewayError::Cache(format!("{}: {e}", path.display()))),
        };
        let entry: CacheEntry = serde_json::from_slice(&bytes)
            .map_err(|e| GatewayError::Cache(format!("corrupt entry {}: {e}", path.display())))?;
        if entry.key != key.0 || key_material(&entry.request) != key_material(request) {
            return Err(GatewayError::Cache(format!(
                "entry {} does not match its request",
                path.display()
            )));
        }
        Ok(Some(CachedResponse {
            text: entry.text,
            usage: entry.usage,
        }))
    }

    pub fn put(
        &self,
        key: &CacheKey,
        request: &ChatRequest,
        text: &str,
        usage: Option<Usage>,
    ) -> Result<(), GatewayError> {
        let entry = CacheEntry {
            key: key.0.clone(),
            request: request.clone(),
            text: text.to_string(),
            usage,
        };
        let bytes = serde_json::to_vec_pretty(&entry).expect("cache entry serializes");
        let path = self.path_for(key);
        write_atomic(&path, &bytes).map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))
    }
}
