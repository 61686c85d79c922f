//! Stage runner: prepare, optimize, annotate, adjudicate, evaluate,
//! agreement, report. Every stage reads and writes files under
//! `<workdir>/runs/<dataset>/` and records hashes in `manifest.json`.

pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::adjudication::{
    adjudicator_id, majority_echo_backend, run_adjudication, AdjudicationError, AdjudicationMode, Adjudicator,
    LlmAdjudicator,
};
use crate::annotator::{rank_annotators, run_annotator, Annotator};
use crate::dataset::{
    parse_split, partition_dev, read_run, write_run, DatasetError, DatasetSplit, DevPartition, SplitName,
};
use crate::gateway::{ChatBackend, ChatParams, Gateway, GatewayError, MockBackend, OpenAiBackend, ResponseCache};
use crate::metrics::{
    agreement_csv, agreement_suite, agreement_table, element_table, exact_match_prf, joint_table, metrics_csv, run_map,
    AgreementElement, MetricRow, MetricsError, Projection, RunMap,
};
use crate::model::{AnnotationRecord, ParseStatus, Sentence, Task};
use crate::prompt::{
    default_adjudication_instruction, default_instruction, fenced_json, load_template, sample_demos, select_icl_count,
    IclSelectionReport, PromptError, PromptProgram, ICL_COUNTS,
};
use crate::util::{sha256_hex, write_atomic};

pub use config::{AdjudicationConfig, AnnotatorConfig, BackendKind, Config, DatasetConfig, EvalConfig, MockKind};
pub use manifest::{hash_file, pretty_json, verify_outputs, Manifest, StageRecord, MANIFEST_FILE};

pub const PARTITION_FILE: &str = "partition.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const TEST_RUN_FILE: &str = "test.jsonl";
pub const REPORTS_DIR: &str = "reports";
/// Pseudo annotator id addressing the adjudicator in `optimize`.
pub const ADJUDICATOR: &str = "adjudicator";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("unknown annotator {0:?}")]
    UnknownAnnotator(String),
    #[error("missing {what}: {} (run `{stage}` first)", path.display())]
    Missing {
        what: String,
        path: PathBuf,
        stage: &'static str,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Adjudication(#[from] AdjudicationError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for usage, config and missing-artifact errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Usage(_)
            | PipelineError::UnknownAnnotator(_)
            | PipelineError::Missing { .. } => 2,
            _ => 1,
        }
    }
}

/// Seed, input hashes and the ids of both dev halves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub dataset: String,
    pub task: Task,
    pub seed: u64,
    pub dev_sha256: String,
    pub test_sha256: String,
    pub icl_pool: Vec<String>,
    pub eval_half: Vec<String>,
}

struct Data {
    dev: DatasetSplit,
    test: DatasetSplit,
    dev_sha256: String,
    test_sha256: String,
}

impl Data {
    fn test_sentences(&self) -> Vec<Sentence> {
        self.test.entries.iter().map(|e| e.sentence.clone()).collect()
    }

    fn test_gold(&self) -> RunMap {
        self.test
            .entries
            .iter()
            .map(|e| (e.sentence.id.clone(), e.gold.clone()))
            .collect()
    }
}

/// Run ranking entry: annotator id with its eval-half joint F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: String,
    pub f1: f64,
}

struct ScoredRun {
    id: String,
    /// Table column label: A1..Ak, Adj, Maj.
    label: String,
    path: PathBuf,
    records: Vec<AnnotationRecord>,
}

pub struct Pipeline {
    config: Config,
    timestamp: String,
    overrides: BTreeMap<String, Arc<dyn ChatBackend>>,
    gateways: Mutex<BTreeMap<String, Arc<Gateway>>>,
}

/// `SOURCE_DATE_EPOCH` when set, otherwise the current time.
fn default_timestamp() -> String {
    let now = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0))
        .unwrap_or_else(chrono::Utc::now);
    now.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn status_counts(records: &[AnnotationRecord]) -> Value {
    let count = |s: ParseStatus| records.iter().filter(|r| r.parse_status == s).count();
    json!({
        "ok": count(ParseStatus::Ok),
        "repaired": count(ParseStatus::Repaired),
        "failed": count(ParseStatus::Failed),
    })
}

impl Pipeline {
    pub fn new(config: Config) -> Self {
        Self {
            config,
            timestamp: default_timestamp(),
            overrides: BTreeMap::new(),
            gateways: Mutex::new(BTreeMap::new()),
        }
    }

    /// Fixes the `created` field of every manifest written from now on.
    pub fn with_timestamp(mut self, timestamp: impl Into<String>) -> Self {
        self.timestamp = timestamp.into();
        self
    }

    /// Replaces the configured backend of annotator `id` (or `"adjudicator"`).
    pub fn set_backend(&mut self, id: &str, backend: Arc<dyn ChatBackend>) {
        self.overrides.insert(id.to_string(), backend);
        self.gateways.lock().expect("gateway map poisoned").remove(id);
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    /// Calls that reached a backend, summed over every gateway.
    pub fn upstream_calls(&self) -> usize {
        self.gateways
            .lock()
            .expect("gateway map poisoned")
            .values()
            .map(|g| g.upstream_calls())
            .sum()
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.config.workdir.join("runs").join(&self.config.dataset.name)
    }

    pub fn annotator_dir(&self, id: &str) -> PathBuf {
        self.runs_dir().join(id)
    }

    pub fn adjudicator_dir(&self, mode: AdjudicationMode) -> PathBuf {
        self.runs_dir().join(format!("{ADJUDICATOR}-{mode}"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.runs_dir().join(REPORTS_DIR)
    }

    fn task(&self) -> Task {
        self.config.dataset.task
    }

    fn stage(&self) -> StageRecord {
        StageRecord {
            created: self.timestamp.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: BTreeMap::new(),
        }
    }

    /// Workdir-relative, slash-separated key for manifests.
    fn rel(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.config.workdir).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    fn add_input(&self, stage: &mut StageRecord, path: &Path) -> Result<(), PipelineError> {
        stage.inputs.insert(self.rel(path), hash_file(path)?);
        Ok(())
    }

    fn add_output(stage: &mut StageRecord, dir: &Path, name: &str) -> Result<(), PipelineError> {
        stage.outputs.insert(name.to_string(), hash_file(&dir.join(name))?);
        Ok(())
    }

    /// Fails when an input recorded by `stage` has changed since.
    fn check_inputs(&self, stage_name: &str, stage: &StageRecord) -> Result<(), PipelineError> {
        for (rel, expected) in &stage.inputs {
            let path = self.config.workdir.join(rel);
            let actual = match fs::read(&path) {
                Ok(bytes) => sha256_hex(&bytes),
                Err(_) => {
                    return Err(PipelineError::Integrity(format!(
                        "input {rel} of the {stage_name} stage is gone"
                    )))
                }
            };
            if &actual != expected {
                return Err(PipelineError::Integrity(format!(
                    "input {rel} changed after the {stage_name} stage ran; rerun {stage_name}"
                )));
            }
        }
        Ok(())
    }

    /// Manifest of `dir` with a verified `stage`.
    fn verified(&self, dir: &Path, stage: &'static str, what: String) -> Result<Manifest, PipelineError> {
        let missing = || PipelineError::Missing {
            what: what.clone(),
            path: dir.to_path_buf(),
            stage,
        };
        let manifest = Manifest::read(dir)?.ok_or_else(missing)?;
        let record = manifest.stage(stage).ok_or_else(missing)?;
        verify_outputs(dir, stage, record)?;
        self.check_inputs(stage, record)?;
        Ok(manifest)
    }

    fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
        write_atomic(path, bytes).map_err(|e| PipelineError::io(path, e))
    }

    fn load_data(&self) -> Result<Data, PipelineError> {
        let ds = &self.config.dataset;
        let read = |path: &Path, name: SplitName| -> Result<(DatasetSplit, String), PipelineError> {
            if !path.is_file() {
                return Err(PipelineError::Config(format!(
                    "{name} dataset not found: {}",
                    path.display()
                )));
            }
            let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|e| PipelineError::Integrity(format!("{}: not UTF-8: {e}", path.display())))?;
            let split = parse_split(&text, ds.task, name, &ds.name).map_err(|e| DatasetError::InFile {
                path: path.to_path_buf(),
                source: Box::new(e),
            })?;
            Ok((split, sha256_hex(&bytes)))
        };
        let (dev, dev_sha256) = read(&ds.dev, SplitName::Dev)?;
        let (test, test_sha256) = read(&ds.test, SplitName::Test)?;
        Ok(Data {
            dev,
            test,
            dev_sha256,
            test_sha256,
        })
    }

    fn partition_path(&self) -> PathBuf {
        self.runs_dir().join(PARTITION_FILE)
    }

    fn load_partition(&self, data: &Data) -> Result<DevPartition, PipelineError> {
        let path = self.partition_path();
        let bytes = fs::read(&path).map_err(|_| PipelineError::Missing {
            what: "dev partition".into(),
            path: path.clone(),
            stage: "prepare",
        })?;
        let file: PartitionFile =
            serde_json::from_slice(&bytes).map_err(|e| PipelineError::Integrity(format!("{}: {e}", path.display())))?;
        if file.dev_sha256 != data.dev_sha256 || file.test_sha256 != data.test_sha256 {
            return Err(PipelineError::Integrity(
                "dataset files changed since `prepare`; rerun prepare".into(),
            ));
        }
        if file.seed != self.config.seed {
            return Err(PipelineError::Integrity(format!(
                "partition was prepared with seed {} but the run uses seed {}; rerun prepare",
                file.seed, self.config.seed
            )));
        }
        let lookup = |ids: &[String]| {
            ids.iter()
                .map(|id| {
                    data.dev
                        .find(id)
                        .cloned()
                        .ok_or_else(|| PipelineError::Integrity(format!("partition names unknown dev entry {id}")))
                })
                .collect::<Result<Vec<_>, _>>()
        };
        Ok(DevPartition {
            seed: file.seed,
            icl_pool: lookup(&file.icl_pool)?,
            eval_half: lookup(&file.eval_half)?,
        })
    }

    fn instruction(&self, name: &str, fallback: &str) -> Result<String, PipelineError> {
        match &self.config.prompts_dir {
            Some(dir) => Ok(load_template(dir, name)?),
            None => Ok(fallback.to_string()),
        }
    }

    fn annotation_instruction(&self) -> Result<String, PipelineError> {
        let task = self.task();
        self.instruction(task.as_str(), default_instruction(task))
    }

    fn adjudication_instruction(&self) -> Result<String, PipelineError> {
        self.instruction("adjudicate", default_adjudication_instruction())
    }

    fn annotator_config(&self, id: &str) -> Result<&AnnotatorConfig, PipelineError> {
        self.config
            .annotators
            .get(id)
            .ok_or_else(|| PipelineError::UnknownAnnotator(id.to_string()))
    }

    fn build_mock(kind: &MockKind, data: &Data) -> Result<MockBackend, PipelineError> {
        Ok(match kind {
            MockKind::GoldEcho => MockBackend::by_sentence(
                data.dev
                    .entries
                    .iter()
                    .chain(&data.test.entries)
                    .map(|e| (e.sentence.id.clone(), fenced_json(&e.gold))),
            ),
            MockKind::Empty => MockBackend::new(|_| Ok("```json\n[]\n```".into())),
            MockKind::Garbage => MockBackend::new(|_| Ok("Sorry, I can not annotate this sentence.".into())),
            MockKind::MajorityEcho => majority_echo_backend(),
            MockKind::Fixture(path) => {
                MockBackend::from_fixture(path).map_err(|e| PipelineError::Config(format!("mock fixture: {e}")))?
            }
        })
    }

    fn make_gateway(&self, key: &str, backend: Arc<dyn ChatBackend>) -> Arc<Gateway> {
        let mut gateways = self.gateways.lock().expect("gateway map poisoned");
        gateways
            .entry(key.to_string())
            .or_insert_with(|| {
                let cache = ResponseCache::new(self.config.workdir.join("cache"));
                Arc::new(Gateway::new(backend, self.config.max_inflight).with_cache(cache))
            })
            .clone()
    }

    fn gateway_for(&self, id: &str, data: &Data) -> Result<Arc<Gateway>, PipelineError> {
        if let Some(g) = self.gateways.lock().expect("gateway map poisoned").get(id) {
            return Ok(g.clone());
        }
        let backend: Arc<dyn ChatBackend> = match self.overrides.get(id) {
            Some(b) => b.clone(),
            None => {
                let cfg = self.annotator_config(id)?;
                match (&cfg.backend, &cfg.mock) {
                    (BackendKind::Mock, Some(kind)) => Arc::new(Self::build_mock(kind, data)?),
                    _ => Arc::new(OpenAiBackend::new(&cfg.params().endpoint)?),
                }
            }
        };
        Ok(self.make_gateway(id, backend))
    }

    /// Gateway for adjudication calls: an explicit override, the configured
    /// adjudication mock, or A1's gateway.
    fn adjudicator_gateway(&self, a1: &str, data: &Data) -> Result<Arc<Gateway>, PipelineError> {
        if let Some(b) = self.overrides.get(ADJUDICATOR) {
            return Ok(self.make_gateway(ADJUDICATOR, b.clone()));
        }
        if let Some(kind) = &self.config.adjudication.mock {
            if let Some(g) = self.gateways.lock().expect("gateway map poisoned").get(ADJUDICATOR) {
                return Ok(g.clone());
            }
            let backend = Arc::new(Self::build_mock(kind, data)?);
            return Ok(self.make_gateway(ADJUDICATOR, backend));
        }
        self.gateway_for(a1, data)
    }

    fn selected_ids(&self, annotator: Option<&str>) -> Result<Vec<String>, PipelineError> {
        match annotator {
            Some(id) => {
                self.annotator_config(id)?;
                Ok(vec![id.to_string()])
            }
            None => Ok(self.config.annotators.keys().cloned().collect()),
        }
    }

    /// Splits the dev set and records the partition.
    pub fn prepare(&self) -> Result<PartitionFile, PipelineError> {
        let data = self.load_data()?;
        let partition = partition_dev(&data.dev.entries, self.config.seed)?;
        let ids = |entries: &[crate::dataset::Entry]| entries.iter().map(|e| e.sentence.id.clone()).collect();
        let file = PartitionFile {
            dataset: self.config.dataset.name.clone(),
            task: self.task(),
            seed: self.config.seed,
            dev_sha256: data.dev_sha256,
            test_sha256: data.test_sha256,
            icl_pool: ids(&partition.icl_pool),
            eval_half: ids(&partition.eval_half),
        };
        let path = self.partition_path();
        fs::create_dir_all(self.runs_dir()).map_err(|e| PipelineError::io(&self.runs_dir(), e))?;
        Self::write_file(&path, &pretty_json(&file))?;
        log::info!(
            "partitioned {} dev entries: {} pool, {} eval",
            data.dev.entries.len(),
            file.icl_pool.len(),
            file.eval_half.len()
        );
        Ok(file)
    }

    /// ICL count selection for one annotator, every annotator, or the
    /// adjudicator (`"adjudicator"`). Without an id the adjudicator is
    /// included when the configured mode is `llm` and k >= 2.
    pub fn optimize(&self, annotator: Option<&str>) -> Result<Vec<IclSelectionReport>, PipelineError> {
        if annotator == Some(ADJUDICATOR) {
            return Ok(vec![self.optimize_adjudicator()?]);
        }
        let data = self.load_data()?;
        let partition = self.load_partition(&data)?;
        let mut reports = Vec::new();
        for id in self.selected_ids(annotator)? {
            reports.push(self.optimize_annotator(&id, &data, &partition)?);
        }
        if annotator.is_none()
            && self.config.adjudication.mode == AdjudicationMode::Llm
            && self.config.annotators.len() >= 2
        {
            reports.push(self.optimize_adjudicator()?);
        }
        Ok(reports)
    }

    fn optimize_annotator(
        &self,
        id: &str,
        data: &Data,
        partition: &DevPartition,
    ) -> Result<IclSelectionReport, PipelineError> {
        let cfg = self.annotator_config(id)?;
        let params = cfg.params();
        let gateway = self.gateway_for(id, data)?;
        let instruction = self.annotation_instruction()?;
        let dir = self.annotator_dir(id);
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let sentences: Vec<Sentence> = partition.eval_half.iter().map(|e| e.sentence.clone()).collect();

        let report = select_icl_count(id, partition, &ICL_COUNTS, |k| -> Result<_, PipelineError> {
            let demos = sample_demos(&partition.icl_pool, k, self.config.seed)?;
            let program = PromptProgram::with_instruction(self.task(), &instruction, demos);
            let annotator = Annotator::new(id, params.clone(), program.clone(), gateway.clone())
                .with_workers(self.config.max_inflight);
            let records = run_annotator(&annotator, &sentences, &dir.join(format!("eval_k{k}.jsonl")))?;
            Ok((program.program_hash(), records))
        })?;
        Self::write_file(&dir.join(SELECTION_FILE), &pretty_json(&report))?;
        log::info!("{id}: chosen k = {} (F1 {:.4})", report.chosen_k, report.chosen().f1);

        let mut stage = self.stage();
        self.add_input(&mut stage, &self.partition_path())?;
        Self::add_output(&mut stage, &dir, SELECTION_FILE)?;
        for k in ICL_COUNTS {
            Self::add_output(&mut stage, &dir, &format!("eval_k{k}.jsonl"))?;
        }
        stage.details.insert("eval_f1".into(), json!(report.chosen().f1));
        let mut manifest = Manifest::new(&self.config.dataset.name, self.task(), id, self.config.seed);
        manifest.model = Some(cfg.model.clone());
        manifest.chosen_k = Some(report.chosen_k);
        manifest.prompt_hash = Some(report.chosen().program_hash.clone());
        manifest.stages.insert("optimize".into(), stage);
        manifest.write(&dir)?;
        Ok(report)
    }

    /// Annotators ordered by eval-half F1 of their chosen k.
    pub fn ranking(&self) -> Result<Vec<Ranked>, PipelineError> {
        let mut scores = Vec::new();
        for id in self.config.annotators.keys() {
            let dir = self.annotator_dir(id);
            self.verified(&dir, "optimize", format!("ICL selection of annotator {id}"))?;
            let report = self.read_selection(&dir)?;
            scores.push((id.clone(), report.chosen().f1));
        }
        let f1: BTreeMap<String, f64> = scores.iter().cloned().collect();
        Ok(rank_annotators(&scores)
            .into_iter()
            .map(|id| Ranked { f1: f1[&id], id })
            .collect())
    }

    fn read_selection(&self, dir: &Path) -> Result<IclSelectionReport, PipelineError> {
        let path = dir.join(SELECTION_FILE);
        let bytes = fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::Integrity(format!("{}: {e}", path.display())))
    }

    fn adjudication_params(&self, a1: &str) -> Result<ChatParams, PipelineError> {
        Ok(self.annotator_config(a1)?.params())
    }

    fn optimize_adjudicator(&self) -> Result<IclSelectionReport, PipelineError> {
        let data = self.load_data()?;
        let partition = self.load_partition(&data)?;
        let ranked = self.ranking()?;
        let mut runs = Vec::new();
        let mut inputs = Vec::new();
        for r in &ranked {
            let dir = self.annotator_dir(&r.id);
            let k = self.read_selection(&dir)?.chosen_k;
            let path = dir.join(format!("eval_k{k}.jsonl"));
            runs.push(read_run(&path)?);
            inputs.push(path);
        }
        let a1 = &ranked[0].id;
        let params = self.adjudication_params(a1)?;
        let gateway = self.adjudicator_gateway(a1, &data)?;
        let instruction = self.adjudication_instruction()?;
        let dir = self.adjudicator_dir(AdjudicationMode::Llm);
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let sentences: Vec<Sentence> = partition.eval_half.iter().map(|e| e.sentence.clone()).collect();
        let id = adjudicator_id(&params.model, AdjudicationMode::Llm);

        let report = select_icl_count(&id, &partition, &ICL_COUNTS, |k| -> Result<_, PipelineError> {
            let demos = sample_demos(&partition.icl_pool, k, self.config.seed)?;
            let program = PromptProgram::adjudication(self.task(), &instruction, demos);
            let llm = LlmAdjudicator::new(params.clone(), program.clone(), gateway.clone());
            let (records, _) = run_adjudication(
                self.task(),
                &sentences,
                &runs,
                &Adjudicator::Llm(&llm),
                self.config.max_inflight,
            )?;
            write_run(&records, &dir.join(format!("eval_k{k}.jsonl")))?;
            Ok((program.program_hash(), records))
        })?;
        Self::write_file(&dir.join(SELECTION_FILE), &pretty_json(&report))?;
        log::info!(
            "adjudicator: chosen k = {} (F1 {:.4})",
            report.chosen_k,
            report.chosen().f1
        );

        let mut stage = self.stage();
        self.add_input(&mut stage, &self.partition_path())?;
        for path in &inputs {
            self.add_input(&mut stage, path)?;
        }
        Self::add_output(&mut stage, &dir, SELECTION_FILE)?;
        for k in ICL_COUNTS {
            Self::add_output(&mut stage, &dir, &format!("eval_k{k}.jsonl"))?;
        }
        let mut manifest = Manifest::read(&dir)?
            .unwrap_or_else(|| Manifest::new(&self.config.dataset.name, self.task(), &id, self.config.seed));
        manifest.annotator_id = id;
        manifest.model = Some(params.model.clone());
        manifest.chosen_k = Some(report.chosen_k);
        manifest.prompt_hash = Some(report.chosen().program_hash.clone());
        manifest.stages.insert("optimize".into(), stage);
        manifest.write(&dir)?;
        Ok(report)
    }

    /// Annotates the test split with each annotator's selected program.
    pub fn annotate(&self, annotator: Option<&str>) -> Result<(), PipelineError> {
        let data = self.load_data()?;
        let partition = self.load_partition(&data)?;
        let sentences = data.test_sentences();
        let instruction = self.annotation_instruction()?;
        for id in self.selected_ids(annotator)? {
            let cfg = self.annotator_config(&id)?;
            let dir = self.annotator_dir(&id);
            let mut manifest = self.verified(&dir, "optimize", format!("ICL selection of annotator {id}"))?;
            let selection = self.read_selection(&dir)?;
            let demos = sample_demos(&partition.icl_pool, selection.chosen_k, self.config.seed)?;
            let program = PromptProgram::with_instruction(self.task(), &instruction, demos);
            let annotator = Annotator::new(
                id.as_str(),
                cfg.params(),
                program.clone(),
                self.gateway_for(&id, &data)?,
            )
            .with_workers(self.config.max_inflight);
            let records = run_annotator(&annotator, &sentences, &dir.join(TEST_RUN_FILE))?;

            let mut stage = self.stage();
            self.add_input(&mut stage, &self.partition_path())?;
            self.add_input(&mut stage, &dir.join(SELECTION_FILE))?;
            Self::add_output(&mut stage, &dir, TEST_RUN_FILE)?;
            stage.details.insert("parse_status".into(), status_counts(&records));
            manifest.prompt_hash = Some(program.program_hash());
            manifest.stages.insert("annotate".into(), stage);
            manifest.write(&dir)?;
            log::info!("{id}: annotated {} sentences", records.len());
        }
        Ok(())
    }

    fn annotator_run(&self, id: &str) -> Result<(PathBuf, Vec<AnnotationRecord>), PipelineError> {
        let dir = self.annotator_dir(id);
        self.verified(&dir, "annotate", format!("run of annotator {id}"))?;
        let path = dir.join(TEST_RUN_FILE);
        let records = read_run(&path)?;
        Ok((path, records))
    }

    /// Combines the annotators' test runs.
    pub fn adjudicate(&self, mode: Option<AdjudicationMode>) -> Result<(), PipelineError> {
        let mode = mode.unwrap_or(self.config.adjudication.mode);
        let data = self.load_data()?;
        let partition = self.load_partition(&data)?;
        let ranked = self.ranking()?;
        let mut runs = Vec::new();
        let mut inputs = Vec::new();
        for r in &ranked {
            let (path, records) = self.annotator_run(&r.id)?;
            runs.push(records);
            inputs.push(path);
        }
        let a1 = &ranked[0].id;
        let params = self.adjudication_params(a1)?;
        let dir = self.adjudicator_dir(mode);
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let id = adjudicator_id(&params.model, mode);
        let mut manifest = Manifest::read(&dir)?
            .unwrap_or_else(|| Manifest::new(&self.config.dataset.name, self.task(), &id, self.config.seed));
        let mut stage = self.stage();
        let sentences = data.test_sentences();

        let (records, stats) = match mode {
            AdjudicationMode::Majority => run_adjudication(
                self.task(),
                &sentences,
                &runs,
                &Adjudicator::Majority {
                    model: params.model.clone(),
                },
                self.config.max_inflight,
            )?,
            AdjudicationMode::Llm => {
                let k = match manifest.stage("optimize") {
                    Some(_) => {
                        self.verified(&dir, "optimize", "adjudicator selection".into())?;
                        self.add_input(&mut stage, &dir.join(SELECTION_FILE))?;
                        self.read_selection(&dir)?.chosen_k
                    }
                    None => self.config.adjudication.icl_k,
                };
                let demos = sample_demos(&partition.icl_pool, k, self.config.seed)?;
                let program = PromptProgram::adjudication(self.task(), &self.adjudication_instruction()?, demos);
                manifest.chosen_k = Some(k);
                manifest.prompt_hash = Some(program.program_hash());
                let llm = LlmAdjudicator::new(params.clone(), program, self.adjudicator_gateway(a1, &data)?);
                run_adjudication(
                    self.task(),
                    &sentences,
                    &runs,
                    &Adjudicator::Llm(&llm),
                    self.config.max_inflight,
                )?
            }
        };
        write_run(&records, &dir.join(TEST_RUN_FILE))?;
        for path in &inputs {
            self.add_input(&mut stage, path)?;
        }
        Self::add_output(&mut stage, &dir, TEST_RUN_FILE)?;
        stage.details.insert("stats".into(), json!(stats));
        stage.details.insert("ranking".into(), json!(ranked));
        stage.details.insert("parse_status".into(), status_counts(&records));
        if stats.novel_opinions > 0 {
            log::warn!(
                "adjudicator proposed {} opinions no annotator made",
                stats.novel_opinions
            );
        }
        manifest.annotator_id = id;
        manifest.model = Some(params.model);
        manifest.stages.insert("adjudicate".into(), stage);
        manifest.write(&dir)?;
        log::info!("adjudicated {} sentences ({mode})", records.len());
        Ok(())
    }

    /// Runs to score: ranked annotators, then any adjudicated runs present.
    fn scored_runs(&self) -> Result<Vec<ScoredRun>, PipelineError> {
        let mut out = Vec::new();
        for (i, r) in self.ranking()?.iter().enumerate() {
            let (path, records) = self.annotator_run(&r.id)?;
            out.push(ScoredRun {
                id: r.id.clone(),
                label: format!("A{}", i + 1),
                path,
                records,
            });
        }
        for (mode, label) in [(AdjudicationMode::Llm, "Adj"), (AdjudicationMode::Majority, "Maj")] {
            let dir = self.adjudicator_dir(mode);
            if Manifest::read(&dir)?.is_some_and(|m| m.stage("adjudicate").is_some()) {
                let manifest = self.verified(&dir, "adjudicate", format!("{mode} adjudication"))?;
                let path = dir.join(TEST_RUN_FILE);
                let records = read_run(&path)?;
                out.push(ScoredRun {
                    id: manifest.annotator_id,
                    label: label.to_string(),
                    path,
                    records,
                });
            }
        }
        Ok(out)
    }

    fn projections(&self) -> Vec<Projection> {
        match &self.config.eval.projections {
            Some(names) => names.iter().filter_map(|n| n.parse().ok()).collect(),
            None => Projection::for_task(self.task()),
        }
    }

    fn reports_manifest(&self) -> Result<Manifest, PipelineError> {
        Ok(Manifest::read(&self.reports_dir())?
            .unwrap_or_else(|| Manifest::new(&self.config.dataset.name, self.task(), REPORTS_DIR, self.config.seed)))
    }

    /// Exact-match P/R/F1 of every run under every projection.
    pub fn evaluate(&self) -> Result<Vec<MetricRow>, PipelineError> {
        let data = self.load_data()?;
        self.load_partition(&data)?;
        let gold = data.test_gold();
        let runs = self.scored_runs()?;
        let projections = self.projections();
        let mut rows = Vec::new();
        let mut stage = self.stage();
        for ScoredRun { id, path, records, .. } in &runs {
            let pred = run_map(records);
            for &p in &projections {
                rows.push(MetricRow::new(
                    &self.config.dataset.name,
                    id,
                    p,
                    exact_match_prf(&gold, &pred, p)?,
                ));
            }
            self.add_input(&mut stage, path)?;
        }
        let columns: Vec<(String, String)> = runs.iter().map(|r| (r.id.clone(), r.label.clone())).collect();
        let mut text = format!("Joint exact match (%), {} {}\n", self.config.dataset.name, self.task());
        text.push_str(&joint_table(&rows, &columns));
        text.push_str("\nF1 by element (%)\n");
        text.push_str(&element_table(&rows, &columns, &projections));
        text.push('\n');
        for (id, label) in &columns {
            text.push_str(&format!("{label} = {id}\n"));
        }

        let dir = self.reports_dir();
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        Self::write_file(&dir.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
        Self::write_file(&dir.join("metrics.txt"), text.as_bytes())?;
        Self::add_output(&mut stage, &dir, "metrics.csv")?;
        Self::add_output(&mut stage, &dir, "metrics.txt")?;
        let mut manifest = self.reports_manifest()?;
        manifest.stages.insert("evaluate".into(), stage);
        manifest.write(&dir)?;
        Ok(rows)
    }

    /// Krippendorff's alpha between the annotators' test runs.
    pub fn agreement(&self) -> Result<crate::metrics::AgreementReport, PipelineError> {
        let data = self.load_data()?;
        self.load_partition(&data)?;
        let mut stage = self.stage();
        let mut runs = Vec::new();
        for r in self.ranking()? {
            let (path, records) = self.annotator_run(&r.id)?;
            self.add_input(&mut stage, &path)?;
            runs.push((r.id, run_map(&records)));
        }
        let report = agreement_suite(
            &self.config.dataset.name,
            self.task(),
            &data.test_sentences(),
            &runs,
            &AgreementElement::for_task(self.task()),
        )?;
        let dir = self.reports_dir();
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let reports = std::slice::from_ref(&report);
        let text = format!(
            "Krippendorff's alpha, {} {}\n{}",
            self.config.dataset.name,
            self.task(),
            agreement_table(reports)
        );
        Self::write_file(&dir.join("agreement.csv"), agreement_csv(reports).as_bytes())?;
        Self::write_file(&dir.join("agreement.txt"), text.as_bytes())?;
        Self::add_output(&mut stage, &dir, "agreement.csv")?;
        Self::add_output(&mut stage, &dir, "agreement.txt")?;
        let mut manifest = self.reports_manifest()?;
        manifest.stages.insert("agreement".into(), stage);
        manifest.write(&dir)?;
        Ok(report)
    }

    /// Combines the metric and agreement tables into `report.txt`.
    pub fn report(&self) -> Result<String, PipelineError> {
        let dir = self.reports_dir();
        self.verified(&dir, "evaluate", "metrics report".into())?;
        self.verified(&dir, "agreement", "agreement report".into())?;
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))
        };
        let mut text = format!(
            "dataset {}  task {}  seed {}\n\nAnnotators by eval-half F1\n",
            self.config.dataset.name,
            self.task(),
            self.config.seed
        );
        for (i, r) in self.ranking()?.iter().enumerate() {
            let model = &self.annotator_config(&r.id)?.model;
            text.push_str(&format!("A{}  {}  {}  {:.2}\n", i + 1, r.id, model, r.f1 * 100.0));
        }
        text.push('\n');
        text.push_str(&read("metrics.txt")?);
        text.push('\n');
        text.push_str(&read("agreement.txt")?);
        Self::write_file(&dir.join("report.txt"), text.as_bytes())?;

        let mut manifest = self.reports_manifest()?;
        let mut stage = self.stage();
        for name in ["metrics.csv", "agreement.csv"] {
            self.add_input(&mut stage, &dir.join(name))?;
        }
        Self::add_output(&mut stage, &dir, "report.txt")?;
        manifest.stages.insert("report".into(), stage);
        manifest.write(&dir)?;
        Ok(text)
    }

    /// Every stage in order, with the configured adjudication mode.
    pub fn run_all(&self) -> Result<String, PipelineError> {
        self.prepare()?;
        self.optimize(None)?;
        self.annotate(None)?;
        self.adjudicate(None)?;
        self.evaluate()?;
        self.agreement()?;
        self.report()
    }
}
