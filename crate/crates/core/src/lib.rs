//! Opinion annotation with LLM annotators and adjudicators.
//!
//! The crate parses ASTE/ACOS datasets, renders few-shot prompt programs,
//! calls OpenAI-compatible endpoints through a caching gateway, adjudicates
//! several annotators' outputs, and scores runs with exact-match and
//! Krippendorff's alpha.

pub mod adjudication;
pub mod annotator;
pub mod dataset;
pub mod gateway;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prompt;
mod util;

pub use util::sha256_hex;
