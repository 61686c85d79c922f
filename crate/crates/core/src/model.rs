//! Domain types for fine-grained opinion annotation.
//!
//! Every opinion that enters an [`AnnotationSet`] is canonicalized first, so
//! set membership and equality always compare canonical surfaces. Token spans
//! ride along for provenance but never take part in equality.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid term: {0:?} is empty after normalization")]
    InvalidTerm(String),
    #[error("invalid aspect category {0:?}: expected entity#attribute")]
    InvalidCategory(String),
    #[error("unknown sentiment polarity {0:?}")]
    UnknownSentiment(String),
    #[error("{0} must be an explicit term in an ASTE triple")]
    ExplicitRequired(&'static str),
    #[error("opinion kind does not match task: expected {expected}, found {found}")]
    TaskMismatch { expected: Task, found: Task },
    #[error("sentence id must be non-empty")]
    EmptyId,
    #[error("span {start}..{end} is invalid for a sentence of {len} tokens")]
    InvalidSpan { start: usize, end: usize, len: usize },
}

/// The two extraction formulations supported by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// (aspect, sentiment, opinion) triples.
    Aste,
    /// (aspect, category, sentiment, opinion) quadruples with implicit terms.
    Acos,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Aste => "aste",
            Task::Acos => "acos",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aste" => Ok(Task::Aste),
            "acos" => Ok(Task::Acos),
            other => Err(format!("unknown task {other:?} (expected aste or acos)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentimentPolarity {
    Positive,
    Negative,
    Neutral,
}

impl SentimentPolarity {
    pub const ALL: [SentimentPolarity; 3] = [Self::Positive, Self::Negative, Self::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Positive => "positive",
            Self::Negative => "negative",
            Self::Neutral => "neutral",
        }
    }
}

impl fmt::Display for SentimentPolarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SentimentPolarity {
    type Err = ModelError;

    /// Accepts the three polarity names in any letter case.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "positive" => Ok(Self::Positive),
            "negative" => Ok(Self::Negative),
            "neutral" => Ok(Self::Neutral),
            _ => Err(ModelError::UnknownSentiment(s.to_string())),
        }
    }
}

/// One input text with a stable id and its whitespace tokenization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    /// Splits `raw` on whitespace; `text` is the tokens rejoined with single spaces.
    pub fn new(id: impl Into<String>, raw: &str) -> Result<Self, ModelError> {
        let id = id.into();
        if id.is_empty() {
            return Err(ModelError::EmptyId);
        }
        let tokens: Vec<String> = raw.split_whitespace().map(str::to_string).collect();
        Ok(Self {
            id,
            text: tokens.join(" "),
            tokens,
        })
    }

    /// Joined tokens of `span`, if the span fits this sentence.
    pub fn span_text(&self, span: Span) -> Result<String, ModelError> {
        span.check(self.tokens.len())?;
        Ok(self.tokens[span.start..span.end].join(" "))
    }
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn check(self, len: usize) -> Result<(), ModelError> {
        if self.start < self.end && self.end <= len {
            Ok(())
        } else {
            Err(ModelError::InvalidSpan {
                start: self.start,
                end: self.end,
                len,
            })
        }
    }
}

/// An aspect or opinion term. Equality, ordering and hashing look only at the
/// surface text; the span is provenance.
#[derive(Debug, Clone)]
pub enum Term {
    Explicit { surface: String, span: Option<Span> },
    Implicit,
}

impl Term {
    pub fn explicit(surface: impl Into<String>) -> Self {
        Term::Explicit {
            surface: surface.into(),
            span: None,
        }
    }

    pub fn with_span(surface: impl Into<String>, span: Span) -> Self {
        Term::Explicit {
            surface: surface.into(),
            span: Some(span),
        }
    }

    pub fn surface(&self) -> Option<&str> {
        match self {
            Term::Explicit { surface, .. } => Some(surface),
            Term::Implicit => None,
        }
    }

    pub fn span(&self) -> Option<Span> {
        match self {
            Term::Explicit { span, .. } => *span,
            Term::Implicit => None,
        }
    }

    pub fn is_implicit(&self) -> bool {
        matches!(self, Term::Implicit)
    }

    pub fn canonical(&self) -> Result<Term, ModelError> {
        canonicalize_term(self)
    }
}

impl PartialEq for Term {
    fn eq(&self, other: &Self) -> bool {
        self.surface() == other.surface()
    }
}

impl Eq for Term {}

impl PartialOrd for Term {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Term {
    fn cmp(&self, other: &Self) -> Ordering {
        self.surface().cmp(&other.surface())
    }
}

impl Hash for Term {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.surface().hash(state);
    }
}

/// Lowercases and collapses whitespace; the shared normalization for surfaces.
pub fn normalize_surface(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn canonicalize_term(term: &Term) -> Result<Term, ModelError> {
    match term {
        Term::Implicit => Ok(Term::Implicit),
        Term::Explicit { surface, span } => {
            let normalized = normalize_surface(surface);
            if normalized.is_empty() {
                return Err(ModelError::InvalidTerm(surface.clone()));
            }
            Ok(Term::Explicit {
                surface: normalized,
                span: *span,
            })
        }
    }
}

/// Coarse `entity#attribute` label, always lowercase.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AspectCategory {
    pub entity: String,
    pub attribute: String,
}

impl AspectCategory {
    pub fn new(entity: &str, attribute: &str) -> Result<Self, ModelError> {
        let invalid = || ModelError::InvalidCategory(format!("{entity}#{attribute}"));
        let entity = entity.trim().to_lowercase();
        let attribute = attribute.trim().to_lowercase();
        let ok = |s: &str| !s.is_empty() && !s.chars().any(char::is_whitespace) && !s.contains('#');
        if !ok(&entity) || !ok(&attribute) {
            return Err(invalid());
        }
        Ok(Self { entity, attribute })
    }
}

impl FromStr for AspectCategory {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (entity, attribute) = s
            .trim()
            .split_once('#')
            .ok_or_else(|| ModelError::InvalidCategory(s.to_string()))?;
        Self::new(entity, attribute).map_err(|_| ModelError::InvalidCategory(s.to_string()))
    }
}

impl fmt::Display for AspectCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.entity, self.attribute)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OpinionTriple {
    pub aspect: Term,
    pub sentiment: SentimentPolarity,
    pub opinion: Term,
}

impl OpinionTriple {
    pub fn new(aspect: Term, sentiment: SentimentPolarity, opinion: Term) -> Result<Self, ModelError> {
        if aspect.is_implicit() {
            return Err(ModelError::ExplicitRequired("aspect"));
        }
        if opinion.is_implicit() {
            return Err(ModelError::ExplicitRequired("opinion"));
        }
        Ok(Self {
            aspect,
            sentiment,
            opinion,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OpinionQuad {
    pub aspect: Term,
    pub category: AspectCategory,
    pub sentiment: SentimentPolarity,
    pub opinion: Term,
}

/// A single opinion of either formulation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Opinion {
    Triple(OpinionTriple),
    Quad(OpinionQuad),
}

impl Opinion {
    pub fn task(&self) -> Task {
        match self {
            Opinion::Triple(_) => Task::Aste,
            Opinion::Quad(_) => Task::Acos,
        }
    }

    pub fn aspect(&self) -> &Term {
        match self {
            Opinion::Triple(t) => &t.aspect,
            Opinion::Quad(q) => &q.aspect,
        }
    }

    pub fn opinion(&self) -> &Term {
        match self {
            Opinion::Triple(t) => &t.opinion,
            Opinion::Quad(q) => &q.opinion,
        }
    }

    pub fn sentiment(&self) -> SentimentPolarity {
        match self {
            Opinion::Triple(t) => t.sentiment,
            Opinion::Quad(q) => q.sentiment,
        }
    }

    pub fn category(&self) -> Option<&AspectCategory> {
        match self {
            Opinion::Triple(_) => None,
            Opinion::Quad(q) => Some(&q.category),
        }
    }

    pub fn canonical(&self) -> Result<Opinion, ModelError> {
        canonicalize_annotation(self)
    }

    /// Canonical wire form; spans are not part of it.
    pub fn to_wire(&self) -> OpinionWire {
        let text = |t: &Term| t.surface().map(str::to_string);
        OpinionWire {
            aspect: text(self.aspect()),
            category: self.category().map(ToString::to_string),
            sentiment: self.sentiment().as_str().to_string(),
            opinion: text(self.opinion()),
        }
    }

    pub fn from_wire(wire: &OpinionWire, task: Task) -> Result<Opinion, ModelError> {
        let term = |s: &Option<String>| match s {
            Some(text) => Term::explicit(text.clone()),
            None => Term::Implicit,
        };
        let sentiment: SentimentPolarity = wire.sentiment.parse()?;
        let opinion = match task {
            Task::Aste => Opinion::Triple(OpinionTriple::new(term(&wire.aspect), sentiment, term(&wire.opinion))?),
            Task::Acos => {
                let category = wire
                    .category
                    .as_deref()
                    .ok_or_else(|| ModelError::InvalidCategory(String::new()))?
                    .parse()?;
                Opinion::Quad(OpinionQuad {
                    aspect: term(&wire.aspect),
                    category,
                    sentiment,
                    opinion: term(&wire.opinion),
                })
            }
        };
        opinion.canonical()
    }
}

/// Serialized opinion: `{"aspect", "category"?, "sentiment", "opinion"}` with
/// `null` for implicit terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpinionWire {
    pub aspect: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub sentiment: String,
    pub opinion: Option<String>,
}

pub fn canonicalize_annotation(opinion: &Opinion) -> Result<Opinion, ModelError> {
    Ok(match opinion {
        Opinion::Triple(t) => Opinion::Triple(OpinionTriple::new(
            canonicalize_term(&t.aspect)?,
            t.sentiment,
            canonicalize_term(&t.opinion)?,
        )?),
        Opinion::Quad(q) => Opinion::Quad(OpinionQuad {
            aspect: canonicalize_term(&q.aspect)?,
            category: AspectCategory::new(&q.category.entity, &q.category.attribute)?,
            sentiment: q.sentiment,
            opinion: canonicalize_term(&q.opinion)?,
        }),
    })
}

/// Canonical, duplicate-free opinions of one task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "AnnotationSetWire", into = "AnnotationSetWire")]
pub struct AnnotationSet {
    task: Task,
    opinions: BTreeSet<Opinion>,
}

impl AnnotationSet {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            opinions: BTreeSet::new(),
        }
    }

    pub fn from_opinions<I>(task: Task, opinions: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = Opinion>,
    {
        let mut set = Self::new(task);
        for opinion in opinions {
            set.insert(opinion)?;
        }
        Ok(set)
    }

    /// Canonicalizes and inserts; returns `false` if an equal opinion was present.
    pub fn insert(&mut self, opinion: Opinion) -> Result<bool, ModelError> {
        if opinion.task() != self.task {
            return Err(ModelError::TaskMismatch {
                expected: self.task,
                found: opinion.task(),
            });
        }
        Ok(self.opinions.insert(opinion.canonical()?))
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn len(&self) -> usize {
        self.opinions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opinions.is_empty()
    }

    pub fn contains(&self, opinion: &Opinion) -> bool {
        self.opinions.contains(opinion)
    }

    /// Opinions in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = &Opinion> {
        self.opinions.iter()
    }

    pub fn to_wire(&self) -> Vec<OpinionWire> {
        self.opinions.iter().map(Opinion::to_wire).collect()
    }

    /// Compact JSON list of canonical opinion objects.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_wire()).expect("opinion wire form always serializes")
    }
}

impl<'a> IntoIterator for &'a AnnotationSet {
    type Item = &'a Opinion;
    type IntoIter = std::collections::btree_set::Iter<'a, Opinion>;

    fn into_iter(self) -> Self::IntoIter {
        self.opinions.iter()
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotationSetWire {
    task: Task,
    opinions: Vec<OpinionWire>,
}

impl TryFrom<AnnotationSetWire> for AnnotationSet {
    type Error = ModelError;

    fn try_from(wire: AnnotationSetWire) -> Result<Self, Self::Error> {
        let mut set = AnnotationSet::new(wire.task);
        for item in &wire.opinions {
            set.insert(Opinion::from_wire(item, wire.task)?)?;
        }
        Ok(set)
    }
}

impl From<AnnotationSet> for AnnotationSetWire {
    fn from(set: AnnotationSet) -> Self {
        AnnotationSetWire {
            task: set.task,
            opinions: set.to_wire(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Ok,
    Repaired,
    Failed,
}

/// One annotator's output for one sentence, with provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sentence_id: String,
    pub annotator_id: String,
    pub annotations: AnnotationSet,
    pub raw_output: String,
    pub prompt_hash: String,
    pub parse_status: ParseStatus,
    /// Dropped objects, fallbacks and other audit notes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl AnnotationRecord {
    pub fn task(&self) -> Task {
        self.annotations.task()
    }

    /// A failed record never carries annotations.
    pub fn is_consistent(&self) -> bool {
        self.parse_status != ParseStatus::Failed || self.annotations.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triple(a: &str, s: SentimentPolarity, o: &str) -> Opinion {
        Opinion::Triple(OpinionTriple::new(Term::explicit(a), s, Term::explicit(o)).unwrap())
    }

    #[test]
    fn canonical_term_normalizes_whitespace_and_case() {
        let t = canonicalize_term(&Term::explicit(" Battery  Life ")).unwrap();
        assert_eq!(t.surface(), Some("battery life"));
        let t = canonicalize_term(&Term::explicit("EXCELLENT")).unwrap();
        assert_eq!(t.surface(), Some("excellent"));
        assert!(canonicalize_term(&Term::Implicit).unwrap().is_implicit());
    }

    #[test]
    fn canonical_term_keeps_span() {
        let t = canonicalize_term(&Term::with_span("Hit", Span::new(4, 5))).unwrap();
        assert_eq!(t.span(), Some(Span::new(4, 5)));
    }

    #[test]
    fn blank_term_is_invalid() {
        assert_eq!(
            canonicalize_term(&Term::explicit(" \t ")),
            Err(ModelError::InvalidTerm(" \t ".into()))
        );
    }

    #[test]
    fn canonical_triple_from_error_table() {
        let c = triple("fish", SentimentPolarity::Positive, "Excellent")
            .canonical()
            .unwrap();
        assert_eq!(c.to_wire().aspect.as_deref(), Some("fish"));
        assert_eq!(c.to_wire().opinion.as_deref(), Some("excellent"));
        assert_eq!(c.sentiment(), SentimentPolarity::Positive);
    }

    #[test]
    fn canonical_quad_with_null_aspect() {
        let q = Opinion::Quad(OpinionQuad {
            aspect: Term::Implicit,
            category: "DRINKS#STYLE".parse().unwrap(),
            sentiment: SentimentPolarity::Positive,
            opinion: Term::explicit("hit"),
        });
        let c = q.canonical().unwrap();
        assert!(c.aspect().is_implicit());
        assert_eq!(c.category().unwrap().to_string(), "drinks#style");
        let json = serde_json::to_string(&c.to_wire()).unwrap();
        assert_eq!(
            json,
            r#"{"aspect":null,"category":"drinks#style","sentiment":"positive","opinion":"hit"}"#
        );
    }

    #[test]
    fn quad_from_table_is_already_canonical() {
        let q = Opinion::Quad(OpinionQuad {
            aspect: Term::explicit("menu items"),
            category: "food#quality".parse().unwrap(),
            sentiment: SentimentPolarity::Positive,
            opinion: Term::explicit("hit"),
        });
        assert_eq!(q.canonical().unwrap(), q);
    }

    #[test]
    fn triple_rejects_implicit_terms() {
        assert_eq!(
            OpinionTriple::new(Term::Implicit, SentimentPolarity::Neutral, Term::explicit("ok")),
            Err(ModelError::ExplicitRequired("aspect"))
        );
    }

    #[test]
    fn category_validation() {
        assert!("food".parse::<AspectCategory>().is_err());
        assert!("#quality".parse::<AspectCategory>().is_err());
        assert!("food stuff#quality".parse::<AspectCategory>().is_err());
        assert_eq!(
            "LAPTOP#OPERATION_PERFORMANCE"
                .parse::<AspectCategory>()
                .unwrap()
                .to_string(),
            "laptop#operation_performance"
        );
    }

    #[test]
    fn set_rejects_wrong_kind() {
        let mut set = AnnotationSet::new(Task::Acos);
        assert!(matches!(
            set.insert(triple("a", SentimentPolarity::Neutral, "b")),
            Err(ModelError::TaskMismatch { .. })
        ));
    }

    #[test]
    fn span_does_not_affect_equality() {
        let a = Opinion::Triple(
            OpinionTriple::new(
                Term::with_span("fish", Span::new(0, 1)),
                SentimentPolarity::Positive,
                Term::explicit("great"),
            )
            .unwrap(),
        );
        let b = triple("FISH", SentimentPolarity::Positive, "great");
        let set = AnnotationSet::from_opinions(Task::Aste, [a, b]).unwrap();
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn sentence_tokens_rejoin() {
        let s = Sentence::new("x", "  great   battery life ").unwrap();
        assert_eq!(s.tokens, vec!["great", "battery", "life"]);
        assert_eq!(s.text, "great battery life");
        assert_eq!(Sentence::new("", "a"), Err(ModelError::EmptyId));
    }

    #[test]
    fn record_json_shape() {
        let set = AnnotationSet::from_opinions(Task::Aste, [triple("fish", SentimentPolarity::Positive, "excellent")])
            .unwrap();
        let rec = AnnotationRecord {
            sentence_id: "s1".into(),
            annotator_id: "a".into(),
            annotations: set,
            raw_output: "[]".into(),
            prompt_hash: "00".into(),
            parse_status: ParseStatus::Ok,
            notes: vec![],
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains(r#""annotations":{"task":"aste","opinions":[{"aspect":"fish","sentiment":"positive","opinion":"excellent"}]}"#));
        let back: AnnotationRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }

    fn surface() -> impl Strategy<Value = String> {
        "[ \tA-Za-z]{0,3}[A-Za-z][ A-Za-z]{0,8}"
    }

    fn polarity() -> impl Strategy<Value = SentimentPolarity> {
        prop::sample::select(SentimentPolarity::ALL.to_vec())
    }

    fn term() -> impl Strategy<Value = Term> {
        prop_oneof![Just(Term::Implicit), surface().prop_map(Term::explicit)]
    }

    fn quad() -> impl Strategy<Value = Opinion> {
        (term(), "[a-zA-Z]{1,6}", "[a-zA-Z_]{1,8}", polarity(), term()).prop_map(
            |(aspect, e, a, sentiment, opinion)| {
                Opinion::Quad(OpinionQuad {
                    aspect,
                    category: AspectCategory::new(&e, &a).unwrap(),
                    sentiment,
                    opinion,
                })
            },
        )
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(op in quad()) {
            let once = op.canonical().unwrap();
            let twice = once.canonical().unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(once.to_wire(), twice.to_wire());
        }

        #[test]
        fn duplicate_insert_keeps_cardinality(op in quad()) {
            let mut set = AnnotationSet::new(Task::Acos);
            set.insert(op.clone()).unwrap();
            let inserted = set.insert(op).unwrap();
            prop_assert!(!inserted);
            prop_assert_eq!(set.len(), 1);
        }

        #[test]
        fn triple_serialization_round_trips(a in surface(), s in polarity(), o in surface()) {
            let op = triple(&a, s, &o).canonical().unwrap();
            let json = serde_json::to_string(&op.to_wire()).unwrap();
            let wire: OpinionWire = serde_json::from_str(&json).unwrap();
            let back = Opinion::from_wire(&wire, Task::Aste).unwrap();
            prop_assert_eq!(back.to_wire(), op.to_wire());
        }
    }
}
