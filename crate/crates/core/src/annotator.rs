//! LLM annotators: render, call, parse with one repair attempt, and rank.

use std::path::Path;
use std::sync::Arc;

use serde_json::Value;

use crate::dataset::{write_run, DatasetError};
use crate::gateway::{ChatMessage, ChatParams, Gateway, RequestMeta};
use crate::model::{
    normalize_surface, AnnotationRecord, AnnotationSet, Opinion, OpinionWire, ParseStatus, Sentence, Task,
};
use crate::prompt::{render_prompt, PromptProgram, RenderedPrompt};
use crate::util::parallel_map;

pub const REPAIR_INSTRUCTION: &str = "Your previous answer could not be parsed. Reply again with only one \
     fenced ```json code block containing the JSON list of opinion objects in the required format.";

/// Result of reading one model answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub annotations: AnnotationSet,
    pub status: ParseStatus,
    /// One entry per dropped object, or the reason nothing parsed.
    pub drops: Vec<String>,
}

fn strip_reasoning(text: &str) -> &str {
    match text.rfind("</think>") {
        Some(end) => &text[end + "</think>".len()..],
        None => text,
    }
}

/// Content of the last fenced block, or the whole text when there is none.
fn last_fenced_block(text: &str) -> &str {
    let parts: Vec<&str> = text.split("```").collect();
    let body = match parts.len() {
        0 | 1 => return text,
        // an unclosed fence: take everything after it
        n if n % 2 == 0 => parts[n - 1],
        n => parts[n - 2],
    };
    match body.split_once('\n') {
        Some((tag, rest)) if !tag.trim().is_empty() && tag.trim().chars().all(|c| c.is_ascii_alphanumeric()) => rest,
        _ => body,
    }
}

fn parse_json_list(candidate: &str) -> Option<Vec<Value>> {
    let value = serde_json::from_str::<Value>(candidate.trim()).ok().or_else(|| {
        let start = candidate.find('[')?;
        let end = candidate.rfind(']')?;
        (start < end)
            .then(|| serde_json::from_str::<Value>(&candidate[start..=end]).ok())
            .flatten()
    })?;
    match value {
        Value::Array(items) => Some(items),
        Value::Object(mut map) => match map.remove("opinions") {
            Some(Value::Array(items)) => Some(items),
            _ => None,
        },
        _ => None,
    }
}

fn term_field(object: &serde_json::Map<String, Value>, name: &str, task: Task) -> Result<Option<String>, String> {
    match object.get(name) {
        None => Err(format!("missing {name}")),
        Some(Value::String(s)) if task == Task::Acos && s.trim().eq_ignore_ascii_case("null") => Ok(None),
        Some(Value::String(s)) if normalize_surface(s).is_empty() => Err(format!("empty {name}")),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Null) if task == Task::Acos => Ok(None),
        Some(Value::Null) => Err(format!("{name} is null in an ASTE triple")),
        Some(other) => Err(format!("{name} is not a string: {other}")),
    }
}

fn string_field(object: &serde_json::Map<String, Value>, name: &str) -> Result<String, String> {
    match object.get(name) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(format!("{name} is not a string: {other}")),
        None => Err(format!("missing {name}")),
    }
}

fn opinion_from_value(value: &Value, task: Task) -> Result<Opinion, String> {
    let Value::Object(object) = value else {
        return Err(format!("not an object: {value}"));
    };
    let wire = OpinionWire {
        aspect: term_field(object, "aspect", task)?,
        category: match task {
            Task::Aste => None,
            Task::Acos => Some(string_field(object, "category")?),
        },
        sentiment: string_field(object, "sentiment")?,
        opinion: term_field(object, "opinion", task)?,
    };
    Opinion::from_wire(&wire, task).map_err(|e| e.to_string())
}

/// Reads a model answer into canonical opinions. Never fails: problems are
/// reported through the status and the drop list.
pub fn parse_llm_output(text: &str, task: Task) -> ParsedOutput {
    let candidate = last_fenced_block(strip_reasoning(text));
    let Some(items) = parse_json_list(candidate) else {
        return ParsedOutput {
            annotations: AnnotationSet::new(task),
            status: ParseStatus::Failed,
            drops: vec!["no JSON list of opinions found".into()],
        };
    };
    let mut annotations = AnnotationSet::new(task);
    let mut drops = Vec::new();
    for (i, item) in items.iter().enumerate() {
        match opinion_from_value(item, task) {
            Ok(opinion) => {
                annotations.insert(opinion).expect("opinion kind matches the set task");
            }
            Err(reason) => drops.push(format!("dropped item {i}: {reason}")),
        }
    }
    let status = if !items.is_empty() && drops.len() == items.len() {
        ParseStatus::Failed
    } else {
        ParseStatus::Ok
    };
    ParsedOutput {
        annotations,
        status,
        drops,
    }
}

/// What one prompt produced after at most one repair round.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub annotations: AnnotationSet,
    pub status: ParseStatus,
    pub raw_output: String,
    pub notes: Vec<String>,
}

/// Calls the gateway with `prompt`; if the answer is unparseable, asks once
/// more with the bad answer and [`REPAIR_INSTRUCTION`] appended.
pub fn complete_with_repair(
    gateway: &Gateway,
    params: &ChatParams,
    prompt: &RenderedPrompt,
    meta: &RequestMeta,
    task: Task,
) -> Outcome {
    let failed = |raw: String, notes: Vec<String>| Outcome {
        annotations: AnnotationSet::new(task),
        status: ParseStatus::Failed,
        raw_output: raw,
        notes,
    };
    let first = match gateway.cached_complete(&prompt.messages, params, meta) {
        Ok(c) => c.text,
        Err(e) => return failed(String::new(), vec![format!("gateway error: {e}")]),
    };
    let parsed = parse_llm_output(&first, task);
    if parsed.status != ParseStatus::Failed {
        return Outcome {
            annotations: parsed.annotations,
            status: parsed.status,
            raw_output: first,
            notes: parsed.drops,
        };
    }

    let mut notes: Vec<String> = parsed.drops.iter().map(|d| format!("first answer: {d}")).collect();
    let mut messages = prompt.messages.clone();
    messages.push(ChatMessage::assistant(first.clone()));
    messages.push(ChatMessage::user(REPAIR_INSTRUCTION));
    let second = match gateway.cached_complete(&messages, params, meta) {
        Ok(c) => c.text,
        Err(e) => {
            notes.push(format!("repair gateway error: {e}"));
            return failed(first, notes);
        }
    };
    let repaired = parse_llm_output(&second, task);
    notes.extend(repaired.drops);
    if repaired.status == ParseStatus::Failed {
        return failed(second, notes);
    }
    Outcome {
        annotations: repaired.annotations,
        status: ParseStatus::Repaired,
        raw_output: second,
        notes,
    }
}

/// One model with its selected prompt program.
pub struct Annotator {
    pub id: String,
    pub params: ChatParams,
    pub program: PromptProgram,
    gateway: Arc<Gateway>,
    workers: usize,
}

impl Annotator {
    pub fn new(id: impl Into<String>, params: ChatParams, program: PromptProgram, gateway: Arc<Gateway>) -> Self {
        Self {
            id: id.into(),
            params,
            program,
            gateway,
            workers: 4,
        }
    }

    /// Number of sentences annotated concurrently.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn task(&self) -> Task {
        self.program.task
    }

    pub fn annotate_sentence(&self, sentence: &Sentence) -> AnnotationRecord {
        let prompt = render_prompt(&self.program, sentence);
        let outcome = complete_with_repair(
            &self.gateway,
            &self.params,
            &prompt,
            &RequestMeta::for_sentence(&sentence.id),
            self.task(),
        );
        AnnotationRecord {
            sentence_id: sentence.id.clone(),
            annotator_id: self.id.clone(),
            annotations: outcome.annotations,
            raw_output: outcome.raw_output,
            prompt_hash: prompt.prompt_hash,
            parse_status: outcome.status,
            notes: outcome.notes,
        }
    }

    /// Records for every sentence, sorted by sentence id.
    pub fn annotate_all(&self, sentences: &[Sentence]) -> Vec<AnnotationRecord> {
        let mut records = parallel_map(sentences, self.workers, |s| self.annotate_sentence(s));
        records.sort_by(|a, b| a.sentence_id.cmp(&b.sentence_id));
        records
    }
}

/// Annotates every sentence and writes the run file.
pub fn run_annotator(
    annotator: &Annotator,
    sentences: &[Sentence],
    path: &Path,
) -> Result<Vec<AnnotationRecord>, DatasetError> {
    let records = annotator.annotate_all(sentences);
    write_run(&records, path)?;
    Ok(records)
}

/// Orders annotators by descending F1, ties by id; the first is A1.
pub fn rank_annotators(scores: &[(String, f64)]) -> Vec<String> {
    let mut ranked: Vec<&(String, f64)> = scores.iter().collect();
    ranked.sort_by(|(ia, fa), (ib, fb)| fb.total_cmp(fa).then_with(|| ia.cmp(ib)));
    ranked.into_iter().map(|(id, _)| id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_acos_line;
    use crate::gateway::{GatewayError, MockBackend};
    use crate::model::SentimentPolarity;
    use proptest::prelude::*;
    use std::time::Duration;

    #[test]
    fn parses_plain_list() {
        let out = parse_llm_output(
            r#"[{"aspect":"fish","sentiment":"positive","opinion":"excellent"}]"#,
            Task::Aste,
        );
        assert_eq!(out.status, ParseStatus::Ok);
        assert_eq!(out.annotations.len(), 1);
        let w = out.annotations.iter().next().unwrap().to_wire();
        assert_eq!(
            (w.aspect.as_deref(), w.opinion.as_deref()),
            (Some("fish"), Some("excellent"))
        );
    }

    #[test]
    fn empty_list_is_ok() {
        let out = parse_llm_output("[]", Task::Aste);
        assert_eq!(out.status, ParseStatus::Ok);
        assert!(out.annotations.is_empty());
    }

    #[test]
    fn prose_is_failed() {
        let out = parse_llm_output("no json here", Task::Aste);
        assert_eq!(out.status, ParseStatus::Failed);
        assert!(out.annotations.is_empty());
    }

    #[test]
    fn takes_last_fenced_block_after_reasoning() {
        let text = "<think>maybe [{\"aspect\":\"x\"}]</think>\nDraft:\n```json\n[]\n```\nFinal:\n```json\n\
                    [{\"aspect\":\"Menu Items\",\"category\":\"FOOD#QUALITY\",\"sentiment\":\"Positive\",\"opinion\":\"hit\"},\
                    {\"aspect\":null,\"category\":\"drinks#style\",\"sentiment\":\"positive\",\"opinion\":\"null\"}]\n```";
        let out = parse_llm_output(text, Task::Acos);
        assert_eq!(out.status, ParseStatus::Ok);
        let wires = out.annotations.to_wire();
        assert_eq!(wires.len(), 2);
        assert!(wires
            .iter()
            .any(|w| w.aspect.as_deref() == Some("menu items") && w.category.as_deref() == Some("food#quality")));
        assert!(wires.iter().any(|w| w.aspect.is_none() && w.opinion.is_none()));
    }

    #[test]
    fn malformed_objects_are_dropped_with_reasons() {
        let text = r#"[{"aspect":"a","sentiment":"great","opinion":"b"},
                       {"aspect":"c","opinion":"d"},
                       {"aspect":null,"sentiment":"neutral","opinion":"e"},
                       {"aspect":"f","sentiment":"negative","opinion":"g"}]"#;
        let out = parse_llm_output(text, Task::Aste);
        assert_eq!(out.status, ParseStatus::Ok);
        assert_eq!(out.annotations.len(), 1);
        assert_eq!(out.drops.len(), 3);
        assert!(out.drops[1].contains("missing sentiment"));
    }

    #[test]
    fn all_dropped_is_failed() {
        let out = parse_llm_output(r#"[{"foo": 1}]"#, Task::Aste);
        assert_eq!(out.status, ParseStatus::Failed);
    }

    #[test]
    fn accepts_wrapped_object() {
        let out = parse_llm_output(
            r#"Here you go: {"opinions": [{"aspect":"a","sentiment":"neutral","opinion":"b"}]}"#,
            Task::Aste,
        );
        // the bracket fallback finds the inner list
        assert_eq!(out.annotations.len(), 1);
    }

    fn quick(model: &str) -> ChatParams {
        ChatParams {
            max_retries: 0,
            retry_base_delay: Duration::ZERO,
            ..ChatParams::new(model)
        }
    }

    fn annotator(backend: MockBackend, task: Task) -> (Annotator, Arc<MockBackend>) {
        let backend = Arc::new(backend);
        let gateway = Arc::new(Gateway::new(backend.clone(), 2));
        (
            Annotator::new("mock", quick("m"), PromptProgram::annotation(task, vec![]), gateway),
            backend,
        )
    }

    #[test]
    fn gold_echo_reproduces_table_quads() {
        let (sentence, gold) = parse_acos_line(
            "All their menu items are a hit , and they serve mimosas .\t2,4 food#quality 2 6,7\t-1,-1 drinks#style 2 6,7",
            1,
            "test-00001",
        )
        .unwrap();
        let reply = crate::prompt::fenced_json(&gold);
        let (a, _) = annotator(MockBackend::new(move |_| Ok(reply.clone())), Task::Acos);
        let rec = a.annotate_sentence(&sentence);
        assert_eq!(rec.parse_status, ParseStatus::Ok);
        assert_eq!(rec.annotations, gold);
        assert_eq!(rec.prompt_hash, render_prompt(&a.program, &sentence).prompt_hash);
    }

    #[test]
    fn garbage_twice_fails() {
        let (a, backend) = annotator(MockBackend::new(|_| Ok("sorry".into())), Task::Aste);
        let rec = a.annotate_sentence(&Sentence::new("s", "good food").unwrap());
        assert_eq!(rec.parse_status, ParseStatus::Failed);
        assert!(rec.annotations.is_empty());
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn garbage_then_json_is_repaired() {
        let (a, backend) = annotator(
            MockBackend::scripted(vec![
                Ok("sorry".into()),
                Ok(r#"```json
[{"aspect":"food","sentiment":"positive","opinion":"good"}]
```"#
                    .into()),
            ]),
            Task::Aste,
        );
        let rec = a.annotate_sentence(&Sentence::new("s", "good food").unwrap());
        assert_eq!(rec.parse_status, ParseStatus::Repaired);
        assert_eq!(rec.annotations.len(), 1);
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn repair_turn_contains_bad_answer() {
        let (a, _) = annotator(
            MockBackend::new(|r| {
                if r.request.messages.len() == 2 {
                    Ok("nope".into())
                } else {
                    assert_eq!(r.request.messages[2].content, "nope");
                    assert_eq!(r.last_user(), REPAIR_INSTRUCTION);
                    Ok("[]".into())
                }
            }),
            Task::Aste,
        );
        let rec = a.annotate_sentence(&Sentence::new("s", "x").unwrap());
        assert_eq!(rec.parse_status, ParseStatus::Repaired);
    }

    #[test]
    fn gateway_errors_become_failed_records() {
        let (a, _) = annotator(
            MockBackend::new(|_| {
                Err(GatewayError::Api {
                    status: 400,
                    body: "bad".into(),
                })
            }),
            Task::Aste,
        );
        let rec = a.annotate_sentence(&Sentence::new("s", "x").unwrap());
        assert_eq!(rec.parse_status, ParseStatus::Failed);
        assert!(rec.notes[0].contains("gateway error"));
    }

    #[test]
    fn run_covers_every_sentence_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let (a, _) = annotator(MockBackend::new(|_| Ok("[]".into())), Task::Aste);
        let sentences: Vec<Sentence> = ["c", "a", "b"]
            .iter()
            .map(|id| Sentence::new(*id, "x y").unwrap())
            .collect();
        let path = dir.path().join("run.jsonl");
        let records = run_annotator(&a, &sentences, &path).unwrap();
        let ids: Vec<_> = records.iter().map(|r| r.sentence_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(crate::dataset::read_run(&path).unwrap(), records);
        assert!(run_annotator(&a, &[], &path).unwrap().is_empty());
    }

    #[test]
    fn ranking_rules() {
        let s = |v: &[(&str, f64)]| v.iter().map(|(a, f)| (a.to_string(), *f)).collect::<Vec<_>>();
        assert_eq!(
            rank_annotators(&s(&[("x", 0.6), ("y", 0.7), ("z", 0.5)])),
            ["y", "x", "z"]
        );
        assert_eq!(rank_annotators(&s(&[("y", 0.6), ("x", 0.6)])), ["x", "y"]);
        assert_eq!(rank_annotators(&s(&[("solo", 0.1)])), ["solo"]);
    }

    fn raw_item() -> impl Strategy<Value = (String, String, String)> {
        (
            "[ A-Za-z]{0,8}",
            prop::sample::select(vec!["positive", "Negative", "NEUTRAL", "good", ""]),
            "[ A-Za-z]{0,8}",
        )
            .prop_map(|(a, s, o)| (a, s.to_string(), o))
    }

    proptest! {
        #[test]
        fn never_invents_opinions(items in prop::collection::vec(raw_item(), 0..6)) {
            let json: Vec<Value> = items
                .iter()
                .map(|(a, s, o)| serde_json::json!({"aspect": a, "sentiment": s, "opinion": o}))
                .collect();
            let text = format!("```json\n{}\n```", Value::Array(json));
            let out = parse_llm_output(&text, Task::Aste);
            for opinion in &out.annotations {
                let w = opinion.to_wire();
                let found = items.iter().any(|(a, s, o)| {
                    Some(normalize_surface(a)) == w.aspect
                        && s.parse::<SentimentPolarity>().ok().map(|p| p.as_str().to_string()) == Some(w.sentiment.clone())
                        && Some(normalize_surface(o)) == w.opinion
                });
                prop_assert!(found, "opinion {:?} not in input", w);
            }
            prop_assert_eq!(out.status == ParseStatus::Failed, !items.is_empty() && out.annotations.is_empty());
        }
    }
}
