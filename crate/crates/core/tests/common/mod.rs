//! Fixture generators shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use opinion_forge::annotator::REPAIR_INSTRUCTION;
use opinion_forge::dataset::{parse_split, SplitName};
use opinion_forge::gateway::MockBackend;
use opinion_forge::model::{AnnotationSet, Opinion, OpinionQuad, OpinionTriple, Task, Term};
use opinion_forge::prompt::fenced_json;
use opinion_forge::sha256_hex;
use rand::seq::IndexedRandom;
use rand::Rng;

const WORDS: &[&str] = &[
    "food", "service", "staff", "price", "screen", "battery", "keyboard", "pasta", "wine", "view", "great", "slow",
    "bad", "cheap", "nice", "awful", "ok", "the", "was", "is", "very", "and", "quite", "menu", "items", "hit",
];

pub const CATEGORIES: &[&str] = &[
    "food#quality",
    "food#style_options",
    "drinks#style_options",
    "service#general",
    "laptop#general",
    "battery#operation_performance",
    "restaurant#prices",
];

fn random_span(rng: &mut impl Rng, n: usize) -> (usize, usize) {
    let start = rng.random_range(0..n);
    let len = rng.random_range(1..=3.min(n - start));
    (start, start + len)
}

fn acos_span(rng: &mut impl Rng, n: usize) -> String {
    if rng.random_bool(0.2) {
        return "-1,-1".to_string();
    }
    let (s, e) = random_span(rng, n);
    format!("{s},{e}")
}

/// One upstream-format line over `tokens` with 1..=3 opinions. ACOS lines use
/// implicit terms about one time in five.
pub fn random_line(rng: &mut impl Rng, task: Task, marker: &str) -> String {
    let n = rng.random_range(5..=12);
    let mut tokens: Vec<String> = (0..n).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
    let at = rng.random_range(0..=n);
    tokens.insert(at, marker.to_string());
    let n = tokens.len();
    let text = tokens.join(" ");
    let count = rng.random_range(1..=3);
    match task {
        Task::Aste => {
            let items: Vec<String> = (0..count)
                .map(|_| {
                    let (a0, a1) = random_span(rng, n);
                    let (o0, o1) = random_span(rng, n);
                    let list = |s: usize, e: usize| {
                        format!("[{}]", (s..e).map(|i| i.to_string()).collect::<Vec<_>>().join(", "))
                    };
                    let pol = ["POS", "NEG", "NEU"].choose(rng).unwrap();
                    format!("({}, {}, '{pol}')", list(a0, a1), list(o0, o1))
                })
                .collect();
            format!("{text}####[{}]", items.join(", "))
        }
        Task::Acos => {
            let mut line = text;
            for _ in 0..count {
                let a = acos_span(rng, n);
                let o = acos_span(rng, n);
                let cat = CATEGORIES.choose(rng).unwrap();
                let pol = rng.random_range(0..3);
                line.push_str(&format!("\t{a} {cat} {pol} {o}"));
            }
            line
        }
    }
}

/// `n` lines with unique marker tokens `<prefix><i>`.
pub fn random_split(rng: &mut impl Rng, task: Task, n: usize, prefix: &str) -> String {
    (0..n)
        .map(|i| random_line(rng, task, &format!("{prefix}{i}")) + "\n")
        .collect()
}

/// Writes dev/test files and a config with the given annotators
/// (`(id, mock kind)`). Returns the config path.
pub fn write_project(
    dir: &Path,
    task: Task,
    dev: &str,
    test: &str,
    annotators: &[(&str, &str)],
    extra: &str,
) -> PathBuf {
    fs::write(dir.join("dev.txt"), dev).unwrap();
    fs::write(dir.join("test.txt"), test).unwrap();
    let mut toml = format!(
        "workdir = \"work\"\nseed = 11\nmax_inflight = 4\n{extra}\n[dataset]\nname = \"fixture\"\ntask = \"{task}\"\ndev = \"dev.txt\"\ntest = \"test.txt\"\n"
    );
    for (id, mock) in annotators {
        toml.push_str(&format!(
            "\n[annotators.{id}]\nmodel = \"mock-{id}\"\nbackend = \"mock\"\nmock = \"{mock}\"\n"
        ));
    }
    let path = dir.join("config.toml");
    fs::write(&path, toml).unwrap();
    path
}

pub fn gold_map(task: Task, dev: &str, test: &str) -> BTreeMap<String, AnnotationSet> {
    let mut out = BTreeMap::new();
    for (text, name) in [(dev, SplitName::Dev), (test, SplitName::Test)] {
        for e in parse_split(text, task, name, "fixture").unwrap().entries {
            out.insert(e.sentence.id.clone(), e.gold);
        }
    }
    out
}

fn bucket(id: &str, salt: &str, modulo: u64) -> u64 {
    let h = sha256_hex(format!("{salt}/{id}").as_bytes());
    u64::from_str_radix(&h[..12], 16).unwrap() % modulo
}

pub fn mangle(set: &AnnotationSet, id: &str, salt: &str) -> AnnotationSet {
    let mut out = AnnotationSet::new(set.task());
    let skip = bucket(id, &format!("{salt}:skip"), set.len().max(1) as u64) as usize;
    for (i, o) in set.iter().enumerate() {
        if i != skip {
            out.insert(o.clone()).unwrap();
        }
    }
    let extra = match set.task() {
        Task::Aste => Opinion::Triple(OpinionTriple {
            aspect: Term::explicit(format!("thing{salt}")),
            sentiment: opinion_forge::model::SentimentPolarity::Neutral,
            opinion: Term::explicit("fine"),
        }),
        Task::Acos => Opinion::Quad(OpinionQuad {
            aspect: Term::Implicit,
            category: "restaurant#general".parse().unwrap(),
            sentiment: opinion_forge::model::SentimentPolarity::Negative,
            opinion: Term::explicit(format!("meh{salt}")),
        }),
    };
    out.insert(extra).unwrap();
    out
}

/// Deterministic imperfect annotator: echoes gold for some sentences,
/// perturbs others, and answers some with prose that needs the repair turn.
pub fn noisy_backend(gold: BTreeMap<String, AnnotationSet>, salt: &str) -> MockBackend {
    let salt = salt.to_string();
    MockBackend::new(move |req| {
        let id = req.meta.sentence_id.clone().unwrap_or_default();
        let Some(set) = gold.get(&id) else {
            return Ok("```json\n[]\n```".into());
        };
        let repair = req.last_user() == REPAIR_INSTRUCTION;
        Ok(match bucket(&id, &salt, 5) {
            0 | 1 => fenced_json(set),
            2 | 3 => fenced_json(&mangle(set, &id, &salt)),
            _ if repair => fenced_json(set),
            _ => "The sentence mentions a few things.".to_string(),
        })
    })
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}
