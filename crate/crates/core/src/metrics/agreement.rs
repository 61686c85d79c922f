//! Krippendorff's alpha over token-level nominal labels.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::{MetricsError, RunMap};
use crate::model::{AnnotationSet, Sentence, Span, Task, Term};

pub const INSIDE: &str = "I";
pub const OUTSIDE: &str = "O";

/// Span elements labelled per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpanElement {
    At,
    Op,
    AtS,
    OpS,
}

impl SpanElement {
    fn uses_aspect(self) -> bool {
        matches!(self, SpanElement::At | SpanElement::AtS)
    }

    fn with_sentiment(self) -> bool {
        matches!(self, SpanElement::AtS | SpanElement::OpS)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLabeling {
    pub labels: Vec<&'static str>,
    /// Explicit terms that could not be found in the sentence.
    pub unlocatable: usize,
}

fn locate(sentence: &Sentence, term: &Term) -> Option<Span> {
    let surface = term.surface()?;
    if let Some(span) = term.span() {
        return span.check(sentence.tokens.len()).ok().map(|_| span);
    }
    let needle: Vec<&str> = surface.split(' ').collect();
    let haystack: Vec<String> = sentence.tokens.iter().map(|t| t.to_lowercase()).collect();
    if needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len())
        .find(|&i| haystack[i..i + needle.len()].iter().zip(&needle).all(|(h, n)| h == n))
        .map(|i| Span::new(i, i + needle.len()))
}

/// Labels each token `I`/`O` (or with the covering opinion's sentiment for
/// the `&s` elements). Overlaps keep the label of the first opinion in
/// canonical order; implicit terms contribute nothing.
pub fn token_labels(sentence: &Sentence, set: &AnnotationSet, element: SpanElement) -> TokenLabeling {
    let mut labels = vec![OUTSIDE; sentence.tokens.len()];
    let mut assigned = vec![false; sentence.tokens.len()];
    let mut unlocatable = 0;
    for opinion in set {
        let term = if element.uses_aspect() {
            opinion.aspect()
        } else {
            opinion.opinion()
        };
        if term.is_implicit() {
            continue;
        }
        let Some(span) = locate(sentence, term) else {
            unlocatable += 1;
            continue;
        };
        let label = if element.with_sentiment() {
            opinion.sentiment().as_str()
        } else {
            INSIDE
        };
        for t in span.start..span.end {
            if !assigned[t] {
                labels[t] = label;
                assigned[t] = true;
            }
        }
    }
    TokenLabeling { labels, unlocatable }
}

/// Nominal Krippendorff's alpha from a coincidence matrix. Each unit is the
/// list of `(coder, label)` pairs it received; units with fewer than two
/// labels are not pairable and are skipped.
pub fn krippendorff_alpha<C, L>(units: &[Vec<(C, L)>]) -> Result<f64, MetricsError>
where
    L: Eq + Hash,
{
    let mut index: HashMap<&L, usize> = HashMap::new();
    for unit in units.iter().filter(|u| u.len() >= 2) {
        for (_, label) in unit {
            let next = index.len();
            index.entry(label).or_insert(next);
        }
    }
    if index.is_empty() {
        return Err(MetricsError::UndefinedAgreement);
    }

    let v = index.len();
    let mut coincidence = vec![vec![0.0f64; v]; v];
    let mut counts = vec![0usize; v];
    for unit in units.iter().filter(|u| u.len() >= 2) {
        counts.iter_mut().for_each(|c| *c = 0);
        for (_, label) in unit {
            counts[index[label]] += 1;
        }
        let weight = 1.0 / (unit.len() - 1) as f64;
        for c in 0..v {
            if counts[c] == 0 {
                continue;
            }
            for k in 0..v {
                let pairs = if c == k {
                    counts[c] * (counts[c] - 1)
                } else {
                    counts[c] * counts[k]
                };
                coincidence[c][k] += pairs as f64 * weight;
            }
        }
    }

    let marginals: Vec<f64> = coincidence.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = marginals.iter().sum();
    let disagreement: f64 = (0..v)
        .flat_map(|c| (0..v).filter(move |&k| k != c).map(move |k| (c, k)))
        .map(|(c, k)| coincidence[c][k])
        .sum();
    let expected = n * n - marginals.iter().map(|m| m * m).sum::<f64>();
    if disagreement == 0.0 || expected <= 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * disagreement / expected)
}

/// Elements reported in agreement tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgreementElement {
    #[serde(rename = "at")]
    At,
    #[serde(rename = "op")]
    Op,
    #[serde(rename = "ac")]
    Ac,
    #[serde(rename = "at&s")]
    AtS,
    #[serde(rename = "op&s")]
    OpS,
}

impl AgreementElement {
    pub fn name(self) -> &'static str {
        match self {
            AgreementElement::At => "at",
            AgreementElement::Op => "op",
            AgreementElement::Ac => "ac",
            AgreementElement::AtS => "at&s",
            AgreementElement::OpS => "op&s",
        }
    }

    pub fn for_task(task: Task) -> Vec<AgreementElement> {
        match task {
            Task::Aste => vec![Self::At, Self::Op, Self::AtS, Self::OpS],
            Task::Acos => vec![Self::At, Self::Op, Self::Ac, Self::AtS, Self::OpS],
        }
    }

    fn span_element(self) -> Option<SpanElement> {
        match self {
            AgreementElement::At => Some(SpanElement::At),
            AgreementElement::Op => Some(SpanElement::Op),
            AgreementElement::AtS => Some(SpanElement::AtS),
            AgreementElement::OpS => Some(SpanElement::OpS),
            AgreementElement::Ac => None,
        }
    }
}

impl fmt::Display for AgreementElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub element: AgreementElement,
    pub alpha: f64,
    /// Pairable units (two or more labels).
    pub units: usize,
    pub coders: usize,
    pub unlocatable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub dataset: String,
    pub task: Task,
    pub rows: Vec<AgreementRow>,
}

fn category_label(set: &AnnotationSet) -> String {
    let mut categories: Vec<String> = set
        .iter()
        .filter_map(|o| o.category().map(ToString::to_string))
        .collect();
    categories.sort();
    serde_json::to_string(&categories).expect("strings serialize")
}

/// Pre-adjudication agreement of `runs` (annotator id, run) over `sentences`.
pub fn agreement_suite(
    dataset: &str,
    task: Task,
    sentences: &[Sentence],
    runs: &[(String, RunMap)],
    elements: &[AgreementElement],
) -> Result<AgreementReport, MetricsError> {
    let ids: BTreeSet<&str> = sentences.iter().map(|s| s.id.as_str()).collect();
    for (annotator, run) in runs {
        if !run.keys().map(String::as_str).eq(ids.iter().copied()) {
            return Err(MetricsError::Integrity(format!(
                "run of {annotator} does not cover the split exactly"
            )));
        }
    }

    let mut rows = Vec::with_capacity(elements.len());
    for &element in elements {
        let mut units: Vec<Vec<(usize, String)>> = Vec::new();
        let mut unlocatable = 0;
        match element.span_element() {
            Some(span_element) => {
                for sentence in sentences {
                    let mut per_token: Vec<Vec<(usize, String)>> =
                        vec![Vec::with_capacity(runs.len()); sentence.tokens.len()];
                    for (coder, (_, run)) in runs.iter().enumerate() {
                        let labeling = token_labels(sentence, &run[&sentence.id], span_element);
                        unlocatable += labeling.unlocatable;
                        for (slot, label) in per_token.iter_mut().zip(labeling.labels) {
                            slot.push((coder, label.to_string()));
                        }
                    }
                    units.extend(per_token);
                }
            }
            None => {
                for sentence in sentences {
                    units.push(
                        runs.iter()
                            .enumerate()
                            .map(|(coder, (_, run))| (coder, category_label(&run[&sentence.id])))
                            .collect(),
                    );
                }
            }
        }
        let alpha = krippendorff_alpha(&units)?;
        rows.push(AgreementRow {
            element,
            alpha,
            units: units.iter().filter(|u| u.len() >= 2).count(),
            coders: runs.len(),
            unlocatable,
        });
    }
    Ok(AgreementReport {
        dataset: dataset.to_string(),
        task,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Opinion, OpinionTriple, SentimentPolarity};

    fn set(items: &[(&str, SentimentPolarity, &str)]) -> AnnotationSet {
        AnnotationSet::from_opinions(
            Task::Aste,
            items.iter().map(|(a, s, o)| {
                Opinion::Triple(OpinionTriple::new(Term::explicit(*a), *s, Term::explicit(*o)).unwrap())
            }),
        )
        .unwrap()
    }

    #[test]
    fn labels_aspect_span() {
        let s = Sentence::new("x", "great battery life").unwrap();
        let a = set(&[("battery life", SentimentPolarity::Positive, "great")]);
        assert_eq!(token_labels(&s, &a, SpanElement::At).labels, vec!["O", "I", "I"]);
        assert_eq!(
            token_labels(&s, &a, SpanElement::OpS).labels,
            vec!["positive", "O", "O"]
        );
    }

    #[test]
    fn unlocatable_terms_are_counted() {
        let s = Sentence::new("x", "great battery life").unwrap();
        let a = set(&[("screen", SentimentPolarity::Positive, "great")]);
        let l = token_labels(&s, &a, SpanElement::At);
        assert_eq!(l.labels, vec!["O", "O", "O"]);
        assert_eq!(l.unlocatable, 1);
    }

    #[test]
    fn first_opinion_wins_overlaps() {
        let s = Sentence::new("x", "Good food bad").unwrap();
        let a = set(&[
            ("food", SentimentPolarity::Positive, "good"),
            ("food", SentimentPolarity::Negative, "bad"),
        ]);
        // canonical order puts ("food", positive, ..) before ("food", negative, ..)
        let first = a.iter().next().unwrap().sentiment().as_str();
        assert_eq!(token_labels(&s, &a, SpanElement::AtS).labels, vec!["O", first, "O"]);
    }

    #[test]
    fn two_coder_example() {
        let units = vec![
            vec![(0, "A"), (1, "A")],
            vec![(0, "A"), (1, "A")],
            vec![(0, "B"), (1, "B")],
            vec![(0, "B"), (1, "A")],
        ];
        let alpha = krippendorff_alpha(&units).unwrap();
        assert!((alpha - (1.0 - 7.0 * 2.0 / 30.0)).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_degenerate_agreement() {
        let units = vec![vec![(0, "A"), (1, "A"), (2, "A")], vec![(0, "B"), (1, "B"), (2, "B")]];
        assert_eq!(krippendorff_alpha(&units).unwrap(), 1.0);
        let single = vec![vec![(0, "O"), (1, "O")]];
        assert_eq!(krippendorff_alpha(&single).unwrap(), 1.0);
        let lonely: Vec<Vec<(usize, &str)>> = vec![vec![(0, "A")], vec![(1, "B")]];
        assert_eq!(krippendorff_alpha(&lonely), Err(MetricsError::UndefinedAgreement));
    }

    #[test]
    fn disjoint_opinion_spans_disagree() {
        let s = Sentence::new("s0", "good bad").unwrap();
        let r1: RunMap = [("s0".to_string(), set(&[("x", SentimentPolarity::Positive, "good")]))].into();
        let r2: RunMap = [("s0".to_string(), set(&[("x", SentimentPolarity::Positive, "bad")]))].into();
        let report = agreement_suite(
            "d",
            Task::Aste,
            &[s],
            &[("a".into(), r1), ("b".into(), r2)],
            &[AgreementElement::Op],
        )
        .unwrap();
        // two units (I,O),(O,I): n=4, all 4 ordered pairs disagree, expected 16-8
        assert!((report.rows[0].alpha - (1.0 - 3.0 * 4.0 / 8.0)).abs() < 1e-12);
        assert!(report.rows[0].alpha <= 0.0);
    }

    #[test]
    fn single_run_is_undefined() {
        let s = Sentence::new("s0", "good food").unwrap();
        let r: RunMap = [("s0".to_string(), set(&[("food", SentimentPolarity::Positive, "good")]))].into();
        assert_eq!(
            agreement_suite(
                "d",
                Task::Aste,
                &[s],
                &[("a".into(), r)],
                &AgreementElement::for_task(Task::Aste)
            ),
            Err(MetricsError::UndefinedAgreement)
        );
    }

    #[test]
    fn coverage_mismatch() {
        let s = Sentence::new("s0", "good food").unwrap();
        let r: RunMap = RunMap::new();
        assert!(matches!(
            agreement_suite(
                "d",
                Task::Aste,
                &[s],
                &[("a".into(), r.clone()), ("b".into(), r)],
                &[AgreementElement::At]
            ),
            Err(MetricsError::Integrity(_))
        ));
    }
}
