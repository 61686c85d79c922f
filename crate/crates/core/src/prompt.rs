//! Prompt programs: an instruction, a described input/output schema and a
//! fixed list of demonstrations, rendered into chat messages.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DevPartition, Entry};
use crate::gateway::ChatMessage;
use crate::metrics::{exact_match_prf, run_map, Projection, RunMap};
use crate::model::{AnnotationRecord, AnnotationSet, ParseStatus, Sentence, Task};
use crate::util::sha256_hex;

/// Demonstration counts tried when selecting a prompt.
pub const ICL_COUNTS: [usize; 3] = [5, 10, 15];

const ASTE_INSTRUCTION: &str = include_str!("../prompts/aste.txt");
const ACOS_INSTRUCTION: &str = include_str!("../prompts/acos.txt");
const ADJUDICATION_INSTRUCTION: &str = include_str!("../prompts/adjudicate.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("ICL pool has {pool} entries, cannot sample {k}")]
    InsufficientPool { k: usize, pool: usize },
    #[error("prompt selection failed: {0}")]
    Selection(String),
    #[error("demonstration {0} does not belong to the ICL pool")]
    ForeignDemo(String),
    #[error("cannot read prompt template {path}: {source}")]
    Template {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub description: String,
}

impl FieldSpec {
    fn new(name: &str, description: &str) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
        }
    }
}

/// Built-in instruction text for annotating `task`.
pub fn default_instruction(task: Task) -> &'static str {
    match task {
        Task::Aste => ASTE_INSTRUCTION,
        Task::Acos => ACOS_INSTRUCTION,
    }
}

pub fn default_adjudication_instruction() -> &'static str {
    ADJUDICATION_INSTRUCTION
}

/// Loads `<dir>/<name>.txt`.
pub fn load_template(dir: &Path, name: &str) -> Result<String, PromptError> {
    let path = dir.join(format!("{name}.txt"));
    std::fs::read_to_string(&path).map_err(|source| PromptError::Template {
        path: path.display().to_string(),
        source,
    })
}

pub fn output_schema(task: Task) -> &'static str {
    match task {
        Task::Aste => {
            "a list of objects {\"aspect\": string, \"sentiment\": \"positive\" | \"negative\" | \"neutral\", \"opinion\": string}. \
             aspect and opinion are spans copied from the text."
        }
        Task::Acos => {
            "a list of objects {\"aspect\": string | null, \"category\": \"entity#attribute\", \
             \"sentiment\": \"positive\" | \"negative\" | \"neutral\", \"opinion\": string | null}. \
             aspect and opinion are spans copied from the text, or null when implicit."
        }
    }
}

const OUTPUT_CONTRACT: &str = "Answer with exactly one fenced code block that starts with ```json and contains \
     the JSON list, and nothing else. Answer with an empty list [] when the text expresses no opinion.";

/// Fenced JSON block holding the canonical serialization of `set`.
pub fn fenced_json(set: &AnnotationSet) -> String {
    format!("```json\n{}\n```", set.to_json())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub messages: Vec<ChatMessage>,
    pub prompt_hash: String,
}

fn hash_messages(messages: &[ChatMessage]) -> String {
    sha256_hex(&serde_json::to_vec(messages).expect("messages serialize"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptProgram {
    pub task: Task,
    pub instruction: String,
    pub input_fields: Vec<FieldSpec>,
    pub output_schema: String,
    pub demos: Vec<Entry>,
}

impl PromptProgram {
    /// Annotation program with the built-in instruction for `task`.
    pub fn annotation(task: Task, demos: Vec<Entry>) -> Self {
        Self::with_instruction(task, default_instruction(task), demos)
    }

    pub fn with_instruction(task: Task, instruction: &str, demos: Vec<Entry>) -> Self {
        Self {
            task,
            instruction: instruction.trim().to_string(),
            input_fields: vec![FieldSpec::new("text", "a review sentence, whitespace tokenized")],
            output_schema: output_schema(task).to_string(),
            demos,
        }
    }

    /// Adjudication program: the input adds the anonymized candidate sets.
    pub fn adjudication(task: Task, instruction: &str, demos: Vec<Entry>) -> Self {
        Self {
            input_fields: vec![
                FieldSpec::new("text", "a review sentence, whitespace tokenized"),
                FieldSpec::new(
                    "candidates",
                    "one JSON list per annotator, labelled Annotator 1 to Annotator k",
                ),
            ],
            ..Self::with_instruction(task, instruction, demos)
        }
    }

    pub fn k(&self) -> usize {
        self.demos.len()
    }

    /// Fails if any demonstration is not in `pool`.
    pub fn check_demos_from(&self, pool: &[Entry]) -> Result<(), PromptError> {
        for demo in &self.demos {
            if !pool.iter().any(|e| e.sentence.id == demo.sentence.id) {
                return Err(PromptError::ForeignDemo(demo.sentence.id.clone()));
            }
        }
        Ok(())
    }

    pub fn system_message(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.instruction);
        out.push_str("\n\nInput fields:\n");
        for field in &self.input_fields {
            out.push_str(&format!("- {}: {}\n", field.name, field.description));
        }
        out.push_str("\nOutput field:\n- opinions: ");
        out.push_str(&self.output_schema);
        out.push_str("\n\n");
        out.push_str(OUTPUT_CONTRACT);
        if !self.demos.is_empty() {
            out.push_str("\n\nThe following conversation turns are annotated examples.");
        }
        out
    }

    fn prefix(&self) -> Vec<ChatMessage> {
        let mut messages = Vec::with_capacity(2 + 2 * self.demos.len());
        messages.push(ChatMessage::system(self.system_message()));
        for demo in &self.demos {
            messages.push(ChatMessage::user(demo.sentence.text.clone()));
            messages.push(ChatMessage::assistant(fenced_json(&demo.gold)));
        }
        messages
    }

    /// Hash of the program itself (system message and demonstrations).
    pub fn program_hash(&self) -> String {
        hash_messages(&self.prefix())
    }

    /// Renders the program with an arbitrary final user turn.
    pub fn render_user(&self, content: String) -> RenderedPrompt {
        let mut messages = self.prefix();
        messages.push(ChatMessage::user(content));
        let prompt_hash = hash_messages(&messages);
        RenderedPrompt { messages, prompt_hash }
    }
}

/// `[system, (user demo, assistant gold) x k, user target]`; the hash is
/// SHA-256 over the serialized messages.
pub fn render_prompt(program: &PromptProgram, sentence: &Sentence) -> RenderedPrompt {
    program.render_user(sentence.text.clone())
}

/// Seeded sample of `k` distinct pool entries without replacement.
pub fn sample_demos(pool: &[Entry], k: usize, seed: u64) -> Result<Vec<Entry>, PromptError> {
    if k > pool.len() {
        return Err(PromptError::InsufficientPool { k, pool: pool.len() });
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order[..k].iter().map(|&i| pool[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub failed: usize,
    pub program_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclSelectionReport {
    pub annotator_id: String,
    pub scores: Vec<KScore>,
    pub chosen_k: usize,
}

impl IclSelectionReport {
    pub fn chosen(&self) -> &KScore {
        self.scores
            .iter()
            .find(|s| s.k == self.chosen_k)
            .expect("chosen k is one of the scored counts")
    }
}

/// Highest F1 wins; ties go to the smaller k.
pub fn choose_k(scores: &[(usize, f64)]) -> Option<usize> {
    scores
        .iter()
        .copied()
        .min_by(|(ka, fa), (kb, fb)| fb.total_cmp(fa).then(ka.cmp(kb)))
        .map(|(k, _)| k)
}

/// Runs `run(k)` on the evaluation half for each k and keeps the best by
/// joint exact-match F1.
pub fn select_icl_count<F, E>(
    annotator_id: &str,
    partition: &DevPartition,
    ks: &[usize],
    mut run: F,
) -> Result<IclSelectionReport, PromptError>
where
    F: FnMut(usize) -> Result<(String, Vec<AnnotationRecord>), E>,
    E: std::fmt::Display,
{
    if let Some(&max_k) = ks.iter().max() {
        if max_k > partition.icl_pool.len() {
            return Err(PromptError::InsufficientPool {
                k: max_k,
                pool: partition.icl_pool.len(),
            });
        }
    }
    let gold: RunMap = partition
        .eval_half
        .iter()
        .map(|e| (e.sentence.id.clone(), e.gold.clone()))
        .collect();
    let mut scores = Vec::with_capacity(ks.len());
    let mut any_parsed = false;
    for &k in ks {
        let (program_hash, records) = run(k).map_err(|e| PromptError::Selection(format!("k={k}: {e}")))?;
        let failed = records.iter().filter(|r| r.parse_status == ParseStatus::Failed).count();
        any_parsed |= failed < records.len() || records.is_empty();
        let prf = exact_match_prf(&gold, &run_map(&records), Projection::Joint)
            .map_err(|e| PromptError::Selection(format!("k={k}: {e}")))?;
        scores.push(KScore {
            k,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            failed,
            program_hash,
        });
    }
    if !any_parsed {
        return Err(PromptError::Selection(format!(
            "every output of {annotator_id} failed to parse for all ICL counts"
        )));
    }
    let pairs: Vec<(usize, f64)> = scores.iter().map(|s| (s.k, s.f1)).collect();
    let chosen_k = choose_k(&pairs).ok_or_else(|| PromptError::Selection("no ICL counts given".into()))?;
    Ok(IclSelectionReport {
        annotator_id: annotator_id.to_string(),
        scores,
        chosen_k,
    })
}
