//! Combining k annotators' opinion sets into one final set, either with an
//! LLM adjudicator or by majority vote.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::annotator::complete_with_repair;
use crate::gateway::{ChatParams, Gateway, MockBackend, RequestMeta};
use crate::model::{AnnotationRecord, AnnotationSet, Opinion, ParseStatus, Sentence, Task};
use crate::prompt::PromptProgram;
use crate::util::{parallel_map, sha256_hex};

pub const MAJORITY_FALLBACK_NOTE: &str = "fallback: majority vote after unparseable adjudication";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdjudicationError {
    #[error("LLM adjudication needs at least 2 annotators, got {0}")]
    TooFewAnnotators(usize),
    #[error("integrity error: {0}")]
    Integrity(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjudicationMode {
    Llm,
    Majority,
}

impl AdjudicationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdjudicationMode::Llm => "llm",
            AdjudicationMode::Majority => "majority",
        }
    }
}

impl fmt::Display for AdjudicationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdjudicationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm" => Ok(Self::Llm),
            "majority" => Ok(Self::Majority),
            other => Err(format!(
                "unknown adjudication mode {other:?} (expected llm or majority)"
            )),
        }
    }
}

/// Annotator id used for adjudicated runs.
pub fn adjudicator_id(model: &str, mode: AdjudicationMode) -> String {
    format!("adjudicator:{model}:{mode}")
}

/// `ceil(k / 2)`.
pub fn majority_threshold(k: usize) -> usize {
    k.div_ceil(2)
}

/// Keeps every opinion proposed by at least `threshold` of the sets.
pub fn adjudicate_majority(task: Task, sets: &[&AnnotationSet], threshold: usize) -> AnnotationSet {
    let mut votes: BTreeMap<&Opinion, usize> = BTreeMap::new();
    for set in sets {
        for opinion in set.iter() {
            *votes.entry(opinion).or_default() += 1;
        }
    }
    let mut out = AnnotationSet::new(task);
    for (opinion, count) in votes {
        if count >= threshold.max(1) {
            out.insert(opinion.clone()).expect("candidate opinions share the task");
        }
    }
    out
}

/// Candidate sets in a canonical order, so the prompt does not depend on
/// which annotator produced which set.
fn ordered_candidates<'a>(sets: &[&'a AnnotationSet]) -> Vec<(&'a AnnotationSet, String)> {
    let mut out: Vec<(&AnnotationSet, String)> = sets.iter().map(|s| (*s, s.to_json())).collect();
    out.sort_by(|a, b| a.1.cmp(&b.1));
    out
}

/// Final user turn: the text followed by `Annotator i: <json list>` lines.
pub fn adjudication_message(sentence: &Sentence, sets: &[&AnnotationSet]) -> String {
    let mut out = format!("Text: {}\n\nCandidate annotations:\n", sentence.text);
    for (i, (_, json)) in ordered_candidates(sets).iter().enumerate() {
        out.push_str(&format!("Annotator {}: {json}\n", i + 1));
    }
    out
}

/// Deterministic digest of the candidate sets for majority-mode records.
fn candidates_hash(sets: &[&AnnotationSet]) -> String {
    let joined: Vec<String> = ordered_candidates(sets).into_iter().map(|(_, j)| j).collect();
    sha256_hex(joined.join("\n").as_bytes())
}

pub struct LlmAdjudicator {
    pub model: String,
    pub params: ChatParams,
    pub program: PromptProgram,
    gateway: Arc<Gateway>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationStats {
    pub sentences: usize,
    pub fallbacks: usize,
    pub repaired: usize,
    /// Opinions in LLM output that no annotator proposed.
    pub novel_opinions: usize,
}

impl LlmAdjudicator {
    pub fn new(params: ChatParams, program: PromptProgram, gateway: Arc<Gateway>) -> Self {
        Self {
            model: params.model.clone(),
            params,
            program,
            gateway,
        }
    }

    /// One adjudicated record plus the number of novel opinions it holds.
    pub fn adjudicate(
        &self,
        sentence: &Sentence,
        records: &[&AnnotationRecord],
    ) -> Result<(AnnotationRecord, usize), AdjudicationError> {
        if records.len() < 2 {
            return Err(AdjudicationError::TooFewAnnotators(records.len()));
        }
        let task = self.program.task;
        let sets: Vec<&AnnotationSet> = records.iter().map(|r| &r.annotations).collect();
        let prompt = self.program.render_user(adjudication_message(sentence, &sets));
        let outcome = complete_with_repair(
            &self.gateway,
            &self.params,
            &prompt,
            &RequestMeta::for_sentence(&sentence.id),
            task,
        );
        let mut notes = outcome.notes;
        let (annotations, status) = if outcome.status == ParseStatus::Failed {
            notes.push(MAJORITY_FALLBACK_NOTE.to_string());
            (
                adjudicate_majority(task, &sets, majority_threshold(sets.len())),
                ParseStatus::Ok,
            )
        } else {
            (outcome.annotations, outcome.status)
        };
        let mut novel = 0;
        for opinion in annotations.iter() {
            if !sets.iter().any(|s| s.contains(opinion)) {
                novel += 1;
                notes.push(format!(
                    "novel opinion: {}",
                    serde_json::to_string(&opinion.to_wire()).expect("wire serializes")
                ));
            }
        }
        Ok((
            AnnotationRecord {
                sentence_id: sentence.id.clone(),
                annotator_id: adjudicator_id(&self.model, AdjudicationMode::Llm),
                annotations,
                raw_output: outcome.raw_output,
                prompt_hash: prompt.prompt_hash,
                parse_status: status,
                notes,
            },
            novel,
        ))
    }
}

pub enum Adjudicator<'a> {
    Majority { model: String },
    Llm(&'a LlmAdjudicator),
}

/// Adjudicates every sentence. Each run must cover `sentences` exactly.
pub fn run_adjudication(
    task: Task,
    sentences: &[Sentence],
    runs: &[Vec<AnnotationRecord>],
    adjudicator: &Adjudicator<'_>,
    workers: usize,
) -> Result<(Vec<AnnotationRecord>, AdjudicationStats), AdjudicationError> {
    let ids: BTreeSet<&str> = sentences.iter().map(|s| s.id.as_str()).collect();
    let mut indexed: Vec<BTreeMap<&str, &AnnotationRecord>> = Vec::with_capacity(runs.len());
    for run in runs {
        let map: BTreeMap<&str, &AnnotationRecord> = run.iter().map(|r| (r.sentence_id.as_str(), r)).collect();
        if map.len() != run.len() || !map.keys().copied().eq(ids.iter().copied()) {
            let who = run.first().map_or("<empty run>", |r| r.annotator_id.as_str());
            return Err(AdjudicationError::Integrity(format!(
                "run of {who} does not cover the split exactly"
            )));
        }
        if let Some(bad) = run.iter().find(|r| r.task() != task) {
            return Err(AdjudicationError::Integrity(format!(
                "run of {} holds {} annotations, expected {task}",
                bad.annotator_id,
                bad.task()
            )));
        }
        indexed.push(map);
    }
    if runs.is_empty() {
        return Err(AdjudicationError::TooFewAnnotators(0));
    }
    if matches!(adjudicator, Adjudicator::Llm(_)) && runs.len() < 2 {
        return Err(AdjudicationError::TooFewAnnotators(runs.len()));
    }

    let results = parallel_map(sentences, workers, |sentence| {
        let records: Vec<&AnnotationRecord> = indexed.iter().map(|m| m[sentence.id.as_str()]).collect();
        match adjudicator {
            Adjudicator::Majority { model } => {
                let sets: Vec<&AnnotationSet> = records.iter().map(|r| &r.annotations).collect();
                let annotations = adjudicate_majority(task, &sets, majority_threshold(sets.len()));
                Ok((
                    AnnotationRecord {
                        sentence_id: sentence.id.clone(),
                        annotator_id: adjudicator_id(model, AdjudicationMode::Majority),
                        annotations,
                        raw_output: String::new(),
                        prompt_hash: candidates_hash(&sets),
                        parse_status: ParseStatus::Ok,
                        notes: vec![],
                    },
                    0,
                ))
            }
            Adjudicator::Llm(llm) => llm.adjudicate(sentence, &records),
        }
    });

    let mut stats = AdjudicationStats::default();
    let mut records = Vec::with_capacity(results.len());
    for result in results {
        let (record, novel) = result?;
        stats.sentences += 1;
        stats.novel_opinions += novel;
        if record.notes.iter().any(|n| n == MAJORITY_FALLBACK_NOTE) {
            stats.fallbacks += 1;
        }
        if record.parse_status == ParseStatus::Repaired {
            stats.repaired += 1;
        }
        records.push(record);
    }
    records.sort_by(|a, b| a.sentence_id.cmp(&b.sentence_id));
    Ok((records, stats))
}

/// Mock adjudicator that counts the candidate lists in the prompt on its own
/// and answers with every object proposed by at least `ceil(k/2)` of them.
pub fn majority_echo_backend() -> MockBackend {
    MockBackend::new(|req| {
        let mut votes: BTreeMap<String, usize> = BTreeMap::new();
        let mut k: usize = 0;
        for line in req.last_user().lines() {
            let Some(rest) = line.strip_prefix("Annotator ") else {
                continue;
            };
            let Some((_, json)) = rest.split_once(": ") else {
                continue;
            };
            let items: Vec<Value> = serde_json::from_str(json).unwrap_or_default();
            k += 1;
            let distinct: BTreeSet<String> = items.iter().map(Value::to_string).collect();
            for item in distinct {
                *votes.entry(item).or_default() += 1;
            }
        }
        let need = k.div_ceil(2).max(1);
        let kept: Vec<String> = votes.into_iter().filter(|(_, n)| *n >= need).map(|(v, _)| v).collect();
        Ok(format!("```json\n[{}]\n```", kept.join(",")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;
    use crate::model::{OpinionTriple, SentimentPolarity, Term};
    use std::time::Duration;

    fn t(a: &str, o: &str) -> Opinion {
        Opinion::Triple(OpinionTriple::new(Term::explicit(a), SentimentPolarity::Positive, Term::explicit(o)).unwrap())
    }

    fn set(ops: &[Opinion]) -> AnnotationSet {
        AnnotationSet::from_opinions(Task::Aste, ops.iter().cloned()).unwrap()
    }

    fn record(id: &str, who: &str, s: AnnotationSet) -> AnnotationRecord {
        AnnotationRecord {
            sentence_id: id.into(),
            annotator_id: who.into(),
            annotations: s,
            raw_output: String::new(),
            prompt_hash: String::new(),
            parse_status: ParseStatus::Ok,
            notes: vec![],
        }
    }

    #[test]
    fn majority_hand_count() {
        let (t1, t2, t3) = (t("a", "b"), t("c", "d"), t("e", "f"));
        let sets = [
            set(&[t1.clone(), t2]),
            set(std::slice::from_ref(&t1)),
            set(&[t1.clone(), t3]),
        ];
        let refs: Vec<&AnnotationSet> = sets.iter().collect();
        // t1: 3 votes, t2: 1, t3: 1; threshold ceil(3/2) = 2
        assert_eq!(
            adjudicate_majority(Task::Aste, &refs, majority_threshold(3)),
            set(&[t1])
        );
    }

    #[test]
    fn majority_single_and_pair() {
        let a = set(&[t("a", "b"), t("c", "d")]);
        assert_eq!(adjudicate_majority(Task::Aste, &[&a], majority_threshold(1)), a);
        let b = set(&[t("x", "y")]);
        let union = set(&[t("a", "b"), t("c", "d"), t("x", "y")]);
        assert_eq!(majority_threshold(2), 1);
        assert_eq!(adjudicate_majority(Task::Aste, &[&a, &b], 1), union);
    }

    fn llm(backend: MockBackend) -> (LlmAdjudicator, Arc<MockBackend>) {
        let backend = Arc::new(backend);
        let gateway = Arc::new(Gateway::new(backend.clone(), 2));
        let params = ChatParams {
            max_retries: 0,
            retry_base_delay: Duration::ZERO,
            ..ChatParams::new("a1-model")
        };
        let program =
            PromptProgram::adjudication(Task::Aste, crate::prompt::default_adjudication_instruction(), vec![]);
        (LlmAdjudicator::new(params, program, gateway), backend)
    }

    #[test]
    fn consensus_passes_through() {
        let s = Sentence::new("s1", "the fish was excellent").unwrap();
        let consensus = set(&[t("fish", "excellent")]);
        let reply = crate::prompt::fenced_json(&consensus);
        let (adj, _) = llm(MockBackend::new(move |_| Ok(reply.clone())));
        let recs: Vec<AnnotationRecord> = (0..3)
            .map(|i| record("s1", &format!("a{i}"), consensus.clone()))
            .collect();
        let refs: Vec<&AnnotationRecord> = recs.iter().collect();
        let (out, novel) = adj.adjudicate(&s, &refs).unwrap();
        assert_eq!(out.annotations, consensus);
        assert_eq!(novel, 0);
        assert_eq!(out.annotator_id, "adjudicator:a1-model:llm");
    }

    #[test]
    fn aspect_confusion_resolved_by_majority_echo() {
        let s = Sentence::new(
            "s1",
            "I have eaten here three times and have found the quality and variety of the fish to be excellent .",
        )
        .unwrap();
        let fish = set(&[t("fish", "excellent")]);
        let quality = set(&[t("quality", "excellent")]);
        let recs = [
            record("s1", "a", fish.clone()),
            record("s1", "b", quality),
            record("s1", "c", fish.clone()),
        ];
        let refs: Vec<&AnnotationRecord> = recs.iter().collect();
        let (adj, _) = llm(majority_echo_backend());
        let (out, _) = adj.adjudicate(&s, &refs).unwrap();
        assert_eq!(out.annotations, fish);
    }

    #[test]
    fn garbage_falls_back_to_majority() {
        let s = Sentence::new("s1", "x").unwrap();
        let recs = [
            record("s1", "a", set(&[t("a", "b")])),
            record("s1", "b", set(&[t("a", "b")])),
            record("s1", "c", set(&[t("c", "d")])),
        ];
        let refs: Vec<&AnnotationRecord> = recs.iter().collect();
        let (adj, backend) = llm(MockBackend::new(|_| Ok("???".into())));
        let (out, _) = adj.adjudicate(&s, &refs).unwrap();
        assert_eq!(backend.calls(), 2);
        assert_eq!(out.annotations, set(&[t("a", "b")]));
        assert!(out.notes.iter().any(|n| n == MAJORITY_FALLBACK_NOTE));
        assert!(out.is_consistent());
    }

    #[test]
    fn novel_opinions_are_flagged() {
        let s = Sentence::new("s1", "x").unwrap();
        let recs = [
            record("s1", "a", set(&[t("a", "b")])),
            record("s1", "b", set(&[t("a", "b")])),
        ];
        let refs: Vec<&AnnotationRecord> = recs.iter().collect();
        let (adj, _) = llm(MockBackend::new(|_| {
            Ok(r#"[{"aspect":"new","sentiment":"positive","opinion":"thing"}]"#.into())
        }));
        let (out, novel) = adj.adjudicate(&s, &refs).unwrap();
        assert_eq!(novel, 1);
        assert_eq!(out.annotations.len(), 1);
        assert!(out.notes.iter().any(|n| n.starts_with("novel opinion")));
    }

    #[test]
    fn llm_needs_two_annotators() {
        let (adj, _) = llm(MockBackend::new(|_| Ok("[]".into())));
        let rec = record("s1", "a", set(&[]));
        assert_eq!(
            adj.adjudicate(&Sentence::new("s1", "x").unwrap(), &[&rec]),
            Err(AdjudicationError::TooFewAnnotators(1))
        );
    }

    #[test]
    fn prompt_ignores_annotator_order() {
        let s = Sentence::new("s1", "x").unwrap();
        let a = set(&[t("a", "b")]);
        let b = set(&[t("c", "d")]);
        assert_eq!(adjudication_message(&s, &[&a, &b]), adjudication_message(&s, &[&b, &a]));
        assert!(adjudication_message(&s, &[&a, &b]).contains("Annotator 2: "));
    }

    #[test]
    fn run_requires_full_coverage() {
        let sentences = vec![Sentence::new("s1", "x").unwrap(), Sentence::new("s2", "y").unwrap()];
        let full = vec![record("s1", "a", set(&[])), record("s2", "a", set(&[]))];
        let partial = vec![record("s1", "b", set(&[]))];
        let err = run_adjudication(
            Task::Aste,
            &sentences,
            &[full.clone(), partial],
            &Adjudicator::Majority { model: "m".into() },
            2,
        )
        .unwrap_err();
        assert!(matches!(err, AdjudicationError::Integrity(_)));
        let (out, stats) = run_adjudication(
            Task::Aste,
            &sentences,
            &[full],
            &Adjudicator::Majority { model: "m".into() },
            2,
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(stats.sentences, 2);
        assert_eq!(out[0].annotator_id, "adjudicator:m:majority");
    }
}
