//! Exact-match scoring and inter-annotator agreement.
//!
//! Scores are micro-averaged: per-sentence set intersections are summed over
//! the whole split before precision and recall are taken.

mod agreement;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AnnotationRecord, AnnotationSet, Opinion, Task, Term};

pub use agreement::{
    agreement_suite, krippendorff_alpha, token_labels, AgreementElement, AgreementReport, AgreementRow, SpanElement,
    TokenLabeling,
};
pub use report::{
    agreement_csv, agreement_table, element_table, joint_table, metrics_csv, parse_metrics_csv, MetricRow,
};

/// Rendering of an implicit term inside projected tuples.
pub const IMPLICIT: &str = "⊥";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("projection {projection} is not defined for {task}")]
    Usage { projection: Projection, task: Task },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("agreement is undefined: no unit has labels from two or more coders")]
    UndefinedAgreement,
}

/// Which opinion elements take part in a match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Projection {
    S,
    At,
    Op,
    E,
    A,
    Ac,
    SAt,
    SOp,
    AtOp,
    SAc,
    AtAc,
    OpAc,
    AtSOp,
    Joint,
}

impl Projection {
    pub const ALL: [Projection; 14] = [
        Projection::S,
        Projection::At,
        Projection::Op,
        Projection::E,
        Projection::A,
        Projection::Ac,
        Projection::SAt,
        Projection::SOp,
        Projection::AtOp,
        Projection::SAc,
        Projection::AtAc,
        Projection::OpAc,
        Projection::AtSOp,
        Projection::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::S => "s",
            Projection::At => "at",
            Projection::Op => "op",
            Projection::E => "E",
            Projection::A => "A",
            Projection::Ac => "ac",
            Projection::SAt => "s&at",
            Projection::SOp => "s&op",
            Projection::AtOp => "at&op",
            Projection::SAc => "s&ac",
            Projection::AtAc => "at&ac",
            Projection::OpAc => "op&ac",
            Projection::AtSOp => "at&s&op",
            Projection::Joint => "joint",
        }
    }

    fn needs_category(self) -> bool {
        matches!(
            self,
            Projection::E | Projection::A | Projection::Ac | Projection::SAc | Projection::AtAc | Projection::OpAc
        )
    }

    pub fn valid_for(self, task: Task) -> bool {
        task == Task::Acos || !self.needs_category()
    }

    /// Projections defined for `task`, in table order.
    pub fn for_task(task: Task) -> Vec<Projection> {
        Self::ALL.into_iter().filter(|p| p.valid_for(task)).collect()
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown projection {s:?}"))
    }
}

fn term_value(term: &Term) -> String {
    term.surface().unwrap_or(IMPLICIT).to_string()
}

/// Ordered tuple of the canonical values selected by `projection`.
pub fn project(opinion: &Opinion, projection: Projection) -> Result<Vec<String>, MetricsError> {
    let task = opinion.task();
    if !projection.valid_for(task) {
        return Err(MetricsError::Usage { projection, task });
    }
    let at = || term_value(opinion.aspect());
    let op = || term_value(opinion.opinion());
    let s = || opinion.sentiment().as_str().to_string();
    let cat = || opinion.category().expect("category checked by valid_for");
    let ac = || cat().to_string();
    Ok(match projection {
        Projection::S => vec![s()],
        Projection::At => vec![at()],
        Projection::Op => vec![op()],
        Projection::E => vec![cat().entity.clone()],
        Projection::A => vec![cat().attribute.clone()],
        Projection::Ac => vec![ac()],
        Projection::SAt => vec![s(), at()],
        Projection::SOp => vec![s(), op()],
        Projection::AtOp => vec![at(), op()],
        Projection::SAc => vec![s(), ac()],
        Projection::AtAc => vec![at(), ac()],
        Projection::OpAc => vec![op(), ac()],
        Projection::AtSOp => vec![at(), s(), op()],
        Projection::Joint => match task {
            Task::Aste => vec![at(), s(), op()],
            Task::Acos => vec![at(), ac(), s(), op()],
        },
    })
}

fn project_set(set: &AnnotationSet, projection: Projection) -> Result<BTreeSet<Vec<String>>, MetricsError> {
    set.iter().map(|o| project(o, projection)).collect()
}

/// Micro-averaged counts and scores for one projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub gold: usize,
    pub pred: usize,
    pub matched: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(gold: usize, pred: usize, matched: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(matched, pred);
        let recall = ratio(matched, gold);
        Self {
            gold,
            pred,
            matched,
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
        }
    }
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Annotation sets of one run keyed by sentence id.
pub type RunMap = BTreeMap<String, AnnotationSet>;

pub fn run_map(records: &[AnnotationRecord]) -> RunMap {
    records
        .iter()
        .map(|r| (r.sentence_id.clone(), r.annotations.clone()))
        .collect()
}

pub fn exact_match_prf(gold: &RunMap, pred: &RunMap, projection: Projection) -> Result<Prf, MetricsError> {
    if !gold.keys().eq(pred.keys()) {
        let missing: Vec<&String> = gold.keys().filter(|k| !pred.contains_key(*k)).take(3).collect();
        let extra: Vec<&String> = pred.keys().filter(|k| !gold.contains_key(*k)).take(3).collect();
        return Err(MetricsError::Integrity(format!(
            "gold and prediction cover different sentences (missing {missing:?}, extra {extra:?})"
        )));
    }
    let (mut n_gold, mut n_pred, mut matched) = (0, 0, 0);
    for (id, gold_set) in gold {
        let g = project_set(gold_set, projection)?;
        let p = project_set(&pred[id], projection)?;
        n_gold += g.len();
        n_pred += p.len();
        matched += g.intersection(&p).count();
    }
    Ok(Prf::from_counts(n_gold, n_pred, matched))
}
