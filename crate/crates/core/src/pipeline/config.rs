//! TOML run configuration.
//!
//! ```toml
//! workdir = "work"
//! seed = 13
//!
//! [dataset]
//! name = "lap14"
//! task = "aste"
//! dev = "data/lap14/dev.txt"
//! test = "data/lap14/test.txt"
//!
//! [annotators.a]
//! model = "llama-3.1-70b"
//! endpoint = "http://localhost:8000/v1"
//!
//! [adjudication]
//! mode = "llm"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::Deserialize;

use crate::adjudication::AdjudicationMode;
use crate::gateway::{ChatParams, DEFAULT_MAX_OUTPUT_TOKENS};
use crate::model::Task;

use super::PipelineError;

fn default_max_inflight() -> usize {
    4
}

fn default_icl_k() -> usize {
    5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub workdir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_inflight")]
    pub max_inflight: usize,
    /// Directory with `aste.txt` / `acos.txt` / `adjudicate.txt` overriding
    /// the built-in instructions.
    pub prompts_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub annotators: BTreeMap<String, AnnotatorConfig>,
    #[serde(default)]
    pub adjudication: AdjudicationConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub task: Task,
    pub dev: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Openai,
    Mock,
}

/// Canned backends for offline runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockKind {
    /// Answers every sentence with its gold annotation.
    GoldEcho,
    Empty,
    Garbage,
    /// Votes over the candidate lists of an adjudication prompt.
    MajorityEcho,
    /// JSON object mapping sentence id to reply text.
    Fixture(PathBuf),
}

impl FromStr for MockKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gold-echo" => Ok(Self::GoldEcho),
            "empty" => Ok(Self::Empty),
            "garbage" => Ok(Self::Garbage),
            "majority-echo" => Ok(Self::MajorityEcho),
            other => match other.strip_prefix("fixture:") {
                Some(path) if !path.is_empty() => Ok(Self::Fixture(PathBuf::from(path))),
                _ => Err(format!(
                    "unknown mock {other:?} (expected gold-echo, empty, garbage, majority-echo or fixture:<path>)"
                )),
            },
        }
    }
}

impl<'de> Deserialize<'de> for MockKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorConfig {
    pub model: String,
    #[serde(default)]
    pub backend: BackendKind,
    pub mock: Option<MockKind>,
    pub endpoint: Option<String>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub output_token_limit: Option<u32>,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
}

impl AnnotatorConfig {
    pub fn params(&self) -> ChatParams {
        let mut params = ChatParams::new(&self.model);
        if let Some(endpoint) = &self.endpoint {
            params.endpoint = endpoint.clone();
        }
        if let Some(t) = self.temperature {
            params.temperature = t;
        }
        params.max_output_tokens = self.max_output_tokens.unwrap_or(DEFAULT_MAX_OUTPUT_TOKENS);
        params.output_token_limit = self.output_token_limit;
        if let Some(secs) = self.timeout_secs {
            params.timeout = Duration::from_secs(secs);
        }
        if let Some(n) = self.max_retries {
            params.max_retries = n;
        }
        if self.backend == BackendKind::Mock {
            params.retry_base_delay = Duration::ZERO;
        }
        params
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjudicationConfig {
    #[serde(default = "default_mode")]
    pub mode: AdjudicationMode,
    /// Demonstrations in the adjudication prompt when no selection was run.
    #[serde(default = "default_icl_k")]
    pub icl_k: usize,
    /// Replaces the A1 backend for adjudication calls.
    pub mock: Option<MockKind>,
}

fn default_mode() -> AdjudicationMode {
    AdjudicationMode::Llm
}

impl Default for AdjudicationConfig {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            icl_k: default_icl_k(),
            mock: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Projection names to report; all valid ones for the task by default.
    pub projections: Option<Vec<String>>,
}

impl Config {
    pub fn parse(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut config: Config = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.resolve(base);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.workdir);
        join(&mut self.dataset.dev);
        join(&mut self.dataset.test);
        if let Some(dir) = self.prompts_dir.as_mut() {
            join(dir);
        }
        let mocks = self
            .annotators
            .values_mut()
            .filter_map(|a| a.mock.as_mut())
            .chain(self.adjudication.mock.as_mut());
        for mock in mocks {
            if let MockKind::Fixture(p) = mock {
                join(p);
            }
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.dataset.name.is_empty() || self.dataset.name.contains(['/', '\\']) {
            return bad(format!("invalid dataset name {:?}", self.dataset.name));
        }
        if self.annotators.is_empty() {
            return bad("at least one annotator is required".into());
        }
        if self.max_inflight == 0 {
            return bad("max_inflight must be at least 1".into());
        }
        for (id, a) in &self.annotators {
            if id.is_empty() || id.starts_with("adjudicator") || id == "reports" || id.contains(['/', '\\', ':']) {
                return bad(format!("invalid annotator id {id:?}"));
            }
            match (a.backend, &a.mock) {
                (BackendKind::Mock, None) => {
                    return bad(format!("annotator {id}: backend = \"mock\" needs a mock kind"))
                }
                (BackendKind::Openai, Some(_)) => {
                    return bad(format!("annotator {id}: mock is only valid with backend = \"mock\""))
                }
                _ => {}
            }
            if a.mock == Some(MockKind::MajorityEcho) {
                return bad(format!("annotator {id}: majority-echo is an adjudication mock"));
            }
            a.params()
                .validate()
                .map_err(|e| PipelineError::Config(format!("annotator {id}: {e}")))?;
        }
        if let Some(names) = &self.eval.projections {
            for name in names {
                let p: crate::metrics::Projection = name.parse().map_err(PipelineError::Config)?;
                if !p.valid_for(self.dataset.task) {
                    return bad(format!("projection {name} is not defined for {}", self.dataset.task));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
workdir = "w"
[dataset]
name = "res14"
task = "acos"
dev = "d/dev.tsv"
test = "/abs/test.tsv"
[annotators.a]
model = "m"
backend = "mock"
mock = "gold-echo"
"#;

    #[test]
    fn defaults_and_paths() {
        let c = Config::parse(MINIMAL, Path::new("/cfg")).unwrap();
        assert_eq!(c.max_inflight, 4);
        assert_eq!(c.workdir, PathBuf::from("/cfg/w"));
        assert_eq!(c.dataset.dev, PathBuf::from("/cfg/d/dev.tsv"));
        assert_eq!(c.dataset.test, PathBuf::from("/abs/test.tsv"));
        assert_eq!(c.adjudication.mode, AdjudicationMode::Llm);
        assert_eq!(c.adjudication.icl_k, 5);
        assert_eq!(c.annotators["a"].mock, Some(MockKind::GoldEcho));
    }

    #[test]
    fn rejects_bad_configs() {
        let unknown = MINIMAL.replace("gold-echo", "oracle");
        assert!(matches!(
            Config::parse(&unknown, Path::new(".")),
            Err(PipelineError::Config(_))
        ));
        let no_mock = MINIMAL.replace("mock = \"gold-echo\"", "");
        assert!(Config::parse(&no_mock, Path::new(".")).is_err());
        let temp = format!("{MINIMAL}temperature = -1.0\n");
        assert!(Config::parse(&temp, Path::new(".")).is_err());
        let proj = format!("{MINIMAL}[eval]\nprojections = [\"joint\", \"nope\"]\n");
        assert!(Config::parse(&proj, Path::new(".")).is_err());
    }

    #[test]
    fn fixture_mock_path() {
        let c = Config::parse(&MINIMAL.replace("gold-echo", "fixture:r.json"), Path::new("/cfg")).unwrap();
        assert_eq!(c.annotators["a"].mock, Some(MockKind::Fixture("/cfg/r.json".into())));
    }
}
