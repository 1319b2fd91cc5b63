//! Offline (construction) and online (inference) cost accounting.

use serde::{Deserialize, Serialize};

/// Cost fields shared by backend builds, episodes and run reports.
///
/// Construction fields are filled by backend builds; retrieval and context
/// fields by episodes. Token counts are whitespace-token proxies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub construction_seconds: f64,
    pub corpus_tokens: u64,
    pub construction_seconds_per_1m_tokens: f64,
    pub llm_calls: u64,
    pub llm_tokens_in: u64,
    pub llm_tokens_out: u64,
    pub retrieval_calls: u64,
    pub mean_retrieval_seconds: f64,
    pub mean_context_tokens: f64,
}

impl CostReport {
    /// Sets the construction fields, normalizing elapsed time to one million
    /// corpus tokens. An empty corpus normalizes to zero.
    pub fn with_construction(mut self, seconds: f64, corpus_tokens: u64) -> Self {
        self.construction_seconds = seconds;
        self.corpus_tokens = corpus_tokens;
        self.construction_seconds_per_1m_tokens = per_million_tokens(seconds, corpus_tokens);
        self
    }
}

pub fn per_million_tokens(seconds: f64, tokens: u64) -> f64 {
    if tokens == 0 {
        0.0
    } else {
        seconds * 1_000_000.0 / tokens as f64
    }
}

/// Whitespace-token count used for all cost and budget accounting.
pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
