//! Readers for the upstream ASTE (`####` + triple list) and ACOS
//! (tab-separated quads) files, dev-split partitioning, and JSONL run files.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AnnotationRecord, AnnotationSet, AspectCategory, ModelError, Opinion, OpinionQuad, OpinionTriple, Sentence,
    SentimentPolarity, Span, Task, Term,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: span error: {message}")]
    Span { line: usize, message: String },
    #[error("line {line}: unknown label {label:?}")]
    Label { line: usize, label: String },
    #[error("line {line}: {source}")]
    Model { line: usize, source: ModelError },
    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<DatasetError>,
    },
    #[error("dev split has {size} entries; at least 2 are needed to partition")]
    TooSmall { size: usize },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: invalid run record: {source}", path.display())]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        })
    }
}

/// A sentence paired with its gold annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub sentence: Sentence,
    pub gold: AnnotationSet,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub task: Task,
    pub domain: String,
    pub entries: Vec<Entry>,
}

impl DatasetSplit {
    pub fn find(&self, id: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.sentence.id == id)
    }
}

/// Dev split halves: demonstrations come from `icl_pool`, prompt selection
/// is scored on `eval_half`.
#[derive(Debug, Clone)]
pub struct DevPartition {
    pub seed: u64,
    pub icl_pool: Vec<Entry>,
    pub eval_half: Vec<Entry>,
}

/// Sentence id for the entry on 1-based `line_no` of a split file.
pub fn entry_id(split: SplitName, line_no: usize) -> String {
    format!("{split}-{line_no:05}")
}

struct Cursor<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str, line: usize) -> Self {
        Self {
            src: src.as_bytes(),
            pos: 0,
            line,
        }
    }

    fn err(&self, message: impl Into<String>) -> DatasetError {
        DatasetError::Parse {
            line: self.line,
            message: format!("{} (at column {})", message.into(), self.pos),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, ch: u8) -> Result<(), DatasetError> {
        if self.peek() == Some(ch) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected '{}'", ch as char)))
        }
    }

    fn eat(&mut self, ch: u8) -> bool {
        if self.peek() == Some(ch) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn at_end(&mut self) -> bool {
        self.peek().is_none()
    }

    fn integer(&mut self) -> Result<usize, DatasetError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("expected a token index"))
    }

    fn index_list(&mut self) -> Result<Vec<usize>, DatasetError> {
        self.expect(b'[')?;
        let mut out = Vec::new();
        if self.eat(b']') {
            return Ok(out);
        }
        loop {
            out.push(self.integer()?);
            if self.eat(b']') {
                return Ok(out);
            }
            self.expect(b',')?;
        }
    }

    fn quoted(&mut self) -> Result<String, DatasetError> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected a quoted sentiment tag")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.src.len() {
            return Err(self.err("unterminated sentiment tag"));
        }
        let tag = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(tag)
    }
}

fn contiguous_span(indices: &[usize], len: usize, line: usize, role: &str) -> Result<Span, DatasetError> {
    let span_err = |message: String| DatasetError::Span { line, message };
    let (&first, &last) = match (indices.first(), indices.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(span_err(format!("{role} index list is empty"))),
    };
    if indices.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(span_err(format!(
            "{role} indices {indices:?} are not contiguous and ascending"
        )));
    }
    if last >= len {
        return Err(span_err(format!("{role} index {last} out of range for {len} tokens")));
    }
    Ok(Span::new(first, last + 1))
}

fn spanned_term(sentence: &Sentence, span: Span) -> Term {
    Term::with_span(sentence.tokens[span.start..span.end].join(" "), span)
}

fn aste_polarity(tag: &str, line: usize) -> Result<SentimentPolarity, DatasetError> {
    match tag {
        "POS" => Ok(SentimentPolarity::Positive),
        "NEG" => Ok(SentimentPolarity::Negative),
        "NEU" => Ok(SentimentPolarity::Neutral),
        _ => Err(DatasetError::Label {
            line,
            label: tag.to_string(),
        }),
    }
}

fn aste_tag(polarity: SentimentPolarity) -> &'static str {
    match polarity {
        SentimentPolarity::Positive => "POS",
        SentimentPolarity::Negative => "NEG",
        SentimentPolarity::Neutral => "NEU",
    }
}

/// Parses `sentence####[([a...], [o...], 'TAG'), ...]`.
pub fn parse_aste_line(line: &str, line_no: usize, id: &str) -> Result<(Sentence, AnnotationSet), DatasetError> {
    let model_err = |source| DatasetError::Model { line: line_no, source };
    let mut parts = line.split("####");
    let (text, triples) = match (parts.next(), parts.next(), parts.next()) {
        (Some(t), Some(r), None) => (t, r),
        _ => {
            return Err(DatasetError::Parse {
                line: line_no,
                message: "expected exactly one '####' separator".into(),
            })
        }
    };
    let sentence = Sentence::new(id, text).map_err(model_err)?;
    let mut gold = AnnotationSet::new(Task::Aste);

    let mut cur = Cursor::new(triples, line_no);
    cur.expect(b'[')?;
    if !cur.eat(b']') {
        loop {
            cur.expect(b'(')?;
            let aspect = cur.index_list()?;
            cur.expect(b',')?;
            let opinion = cur.index_list()?;
            cur.expect(b',')?;
            let tag = cur.quoted()?;
            cur.eat(b',');
            cur.expect(b')')?;

            let n = sentence.tokens.len();
            let aspect = contiguous_span(&aspect, n, line_no, "aspect")?;
            let opinion = contiguous_span(&opinion, n, line_no, "opinion")?;
            let polarity = aste_polarity(&tag, line_no)?;
            let triple = OpinionTriple::new(
                spanned_term(&sentence, aspect),
                polarity,
                spanned_term(&sentence, opinion),
            )
            .map_err(model_err)?;
            gold.insert(Opinion::Triple(triple)).map_err(model_err)?;

            if cur.eat(b']') {
                break;
            }
            cur.expect(b',')?;
        }
    }
    if !cur.at_end() {
        return Err(cur.err("trailing characters after triple list"));
    }
    Ok((sentence, gold))
}

fn require_span(term: &Term, sentence: &Sentence, role: &str) -> Result<Option<Span>, DatasetError> {
    match term {
        Term::Implicit => Ok(None),
        Term::Explicit { span: Some(span), .. } => {
            span.check(sentence.tokens.len()).map_err(|e| DatasetError::Span {
                line: 0,
                message: e.to_string(),
            })?;
            Ok(Some(*span))
        }
        Term::Explicit { span: None, surface } => Err(DatasetError::Span {
            line: 0,
            message: format!("{role} {surface:?} has no token span to serialize"),
        }),
    }
}

/// Inverse of [`parse_aste_line`]; every term must carry a span.
pub fn format_aste_line(sentence: &Sentence, gold: &AnnotationSet) -> Result<String, DatasetError> {
    let mut items = Vec::with_capacity(gold.len());
    for opinion in gold {
        let Opinion::Triple(t) = opinion else {
            return Err(DatasetError::Integrity("ACOS opinion in an ASTE set".into()));
        };
        let indices = |span: Option<Span>| -> String {
            let span = span.expect("triple terms are explicit");
            let list: Vec<String> = (span.start..span.end).map(|i| i.to_string()).collect();
            format!("[{}]", list.join(", "))
        };
        let a = require_span(&t.aspect, sentence, "aspect")?;
        let o = require_span(&t.opinion, sentence, "opinion")?;
        items.push(format!("({}, {}, '{}')", indices(a), indices(o), aste_tag(t.sentiment)));
    }
    Ok(format!("{}####[{}]", sentence.text, items.join(", ")))
}

fn acos_span(field: &str, len: usize, line: usize) -> Result<Option<Span>, DatasetError> {
    let (s, e) = field.split_once(',').ok_or_else(|| DatasetError::Parse {
        line,
        message: format!("span {field:?} is not start,end"),
    })?;
    let parse = |v: &str| {
        v.trim().parse::<i64>().map_err(|_| DatasetError::Parse {
            line,
            message: format!("span {field:?} is not start,end"),
        })
    };
    let (start, end) = (parse(s)?, parse(e)?);
    if start == -1 && end == -1 {
        return Ok(None);
    }
    if start < 0 || end < 0 || start >= end || end as usize > len {
        return Err(DatasetError::Span {
            line,
            message: format!("span {start},{end} out of range for {len} tokens"),
        });
    }
    Ok(Some(Span::new(start as usize, end as usize)))
}

fn acos_polarity(field: &str, line: usize) -> Result<SentimentPolarity, DatasetError> {
    match field {
        "0" => Ok(SentimentPolarity::Negative),
        "1" => Ok(SentimentPolarity::Neutral),
        "2" => Ok(SentimentPolarity::Positive),
        _ => Err(DatasetError::Label {
            line,
            label: field.to_string(),
        }),
    }
}

fn acos_code(polarity: SentimentPolarity) -> u8 {
    match polarity {
        SentimentPolarity::Negative => 0,
        SentimentPolarity::Neutral => 1,
        SentimentPolarity::Positive => 2,
    }
}

/// Parses `sentence\tA_SPAN CATEGORY POLARITY O_SPAN[\t...]`.
pub fn parse_acos_line(line: &str, line_no: usize, id: &str) -> Result<(Sentence, AnnotationSet), DatasetError> {
    let model_err = |source| DatasetError::Model { line: line_no, source };
    let mut fields = line.split('\t');
    let text = fields.next().unwrap_or_default();
    let sentence = Sentence::new(id, text).map_err(model_err)?;
    let quads: Vec<&str> = fields.filter(|f| !f.trim().is_empty()).collect();
    if quads.is_empty() {
        return Err(DatasetError::Parse {
            line: line_no,
            message: "no quadruple fields after the sentence".into(),
        });
    }
    let n = sentence.tokens.len();
    let mut gold = AnnotationSet::new(Task::Acos);
    for quad in quads {
        let parts: Vec<&str> = quad.split_whitespace().collect();
        let [a, cat, pol, o] = parts[..] else {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("quad {quad:?} must have 4 space-separated fields"),
            });
        };
        let term = |span: Option<Span>| match span {
            Some(span) => spanned_term(&sentence, span),
            None => Term::Implicit,
        };
        let aspect = term(acos_span(a, n, line_no)?);
        let category: AspectCategory = cat.parse().map_err(model_err)?;
        let sentiment = acos_polarity(pol, line_no)?;
        let opinion = term(acos_span(o, n, line_no)?);
        gold.insert(Opinion::Quad(OpinionQuad {
            aspect,
            category,
            sentiment,
            opinion,
        }))
        .map_err(model_err)?;
    }
    Ok((sentence, gold))
}

/// Inverse of [`parse_acos_line`]; explicit terms must carry spans.
pub fn format_acos_line(sentence: &Sentence, gold: &AnnotationSet) -> Result<String, DatasetError> {
    let mut out = sentence.text.clone();
    let span = |s: Option<Span>| match s {
        Some(s) => format!("{},{}", s.start, s.end),
        None => "-1,-1".to_string(),
    };
    for opinion in gold {
        let Opinion::Quad(q) = opinion else {
            return Err(DatasetError::Integrity("ASTE opinion in an ACOS set".into()));
        };
        let a = require_span(&q.aspect, sentence, "aspect")?;
        let o = require_span(&q.opinion, sentence, "opinion")?;
        out.push('\t');
        out.push_str(&format!(
            "{} {} {} {}",
            span(a),
            q.category,
            acos_code(q.sentiment),
            span(o)
        ));
    }
    Ok(out)
}

pub fn parse_line(task: Task, line: &str, line_no: usize, id: &str) -> Result<(Sentence, AnnotationSet), DatasetError> {
    match task {
        Task::Aste => parse_aste_line(line, line_no, id),
        Task::Acos => parse_acos_line(line, line_no, id),
    }
}

pub fn format_line(task: Task, sentence: &Sentence, gold: &AnnotationSet) -> Result<String, DatasetError> {
    match task {
        Task::Aste => format_aste_line(sentence, gold),
        Task::Acos => format_acos_line(sentence, gold),
    }
}

/// Parses a split from text. Blank lines are skipped; ids come from line numbers.
pub fn parse_split(source: &str, task: Task, name: SplitName, domain: &str) -> Result<DatasetSplit, DatasetError> {
    let mut entries = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let (sentence, gold) = parse_line(task, line, line_no, &entry_id(name, line_no))?;
        entries.push(Entry { sentence, gold });
    }
    Ok(DatasetSplit {
        name,
        task,
        domain: domain.to_string(),
        entries,
    })
}

pub fn load_split(path: &Path, task: Task, name: SplitName, domain: &str) -> Result<DatasetSplit, DatasetError> {
    let source = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    parse_split(&source, task, name, domain).map_err(|e| DatasetError::InFile {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

/// Seeded Fisher-Yates shuffle, then the first `floor(n/2)` entries form the
/// ICL pool and the rest the evaluation half. Each half keeps file order.
pub fn partition_dev(dev: &[Entry], seed: u64) -> Result<DevPartition, DatasetError> {
    if dev.len() < 2 {
        return Err(DatasetError::TooSmall { size: dev.len() });
    }
    let mut order: Vec<usize> = (0..dev.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pool_size = dev.len() / 2;
    let mut pool: Vec<usize> = order[..pool_size].to_vec();
    let mut eval: Vec<usize> = order[pool_size..].to_vec();
    pool.sort_unstable();
    eval.sort_unstable();
    Ok(DevPartition {
        seed,
        icl_pool: pool.into_iter().map(|i| dev[i].clone()).collect(),
        eval_half: eval.into_iter().map(|i| dev[i].clone()).collect(),
    })
}

/// Serializes records as JSONL sorted by sentence id.
pub fn encode_run(records: &[AnnotationRecord]) -> Result<Vec<u8>, DatasetError> {
    if let Some(first) = records.first() {
        if let Some(other) = records
            .iter()
            .find(|r| r.annotator_id != first.annotator_id || r.task() != first.task())
        {
            return Err(DatasetError::Integrity(format!(
                "run mixes annotators or tasks ({} / {})",
                first.annotator_id, other.annotator_id
            )));
        }
    }
    let mut sorted: Vec<&AnnotationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.sentence_id.cmp(&b.sentence_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].sentence_id == w[1].sentence_id) {
        return Err(DatasetError::Integrity(format!(
            "duplicate sentence_id {}",
            w[0].sentence_id
        )));
    }
    let mut out = Vec::new();
    for record in sorted {
        serde_json::to_writer(&mut out, record).expect("records always serialize");
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_run(records: &[AnnotationRecord], path: &Path) -> Result<(), DatasetError> {
    crate::util::write_atomic(path, &encode_run(records)?).map_err(|e| DatasetError::io(path, e))
}

pub fn read_run(path: &Path) -> Result<Vec<AnnotationRecord>, DatasetError> {
    let source = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(line).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        if !record.is_consistent() {
            return Err(DatasetError::Integrity(format!(
                "failed record {} carries annotations",
                record.sentence_id
            )));
        }
        if !seen.insert(record.sentence_id.clone()) {
            return Err(DatasetError::Integrity(format!(
                "duplicate sentence_id {}",
                record.sentence_id
            )));
        }
        records.push(record);
    }
    Ok(records)
}
