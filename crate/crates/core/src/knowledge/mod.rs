//! Corpus handling and the unified retrieval interface.
//!
//! Every backend (dense index, entity graph, remote service) implements
//! [`KnowledgeBackend`]. Agents only ever go through [`retrieve`], which
//! validates `top_k`, short-circuits empty queries and stamps timing.

mod corpus;
mod dense;
mod graph;
mod persist;
mod remote;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostReport;

pub use corpus::{chunk_corpus, ingest_corpus, ingest_corpus_file, Chunk, ChunkPolicy, Corpus, Document};
pub use dense::{build_dense_backend, DenseBackend, DenseScorer, EmbeddingClient, TfIdfIndex};
pub use graph::{
    build_entity_graph_backend, EntityGraph, Edge, EntityGraphBackend, Extractor, GraphConfig,
    LlmExtractor, Node, RuleExtractor, Triple, EXTRACTION_PROMPT,
};
pub use persist::{load_backend, save_backend, IndexFile, LocalBackend, INDEX_FORMAT, INDEX_VERSION};
pub use remote::{remote_backend, RemoteBackend, RemoteConfig};

/// Retrieval depth used when a caller does not say otherwise.
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    Chunk,
    GraphEdge,
    GraphPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceUnit {
    pub id: String,
    /// Document the unit came from; used for retrieval recall.
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub score: f64,
    pub kind: EvidenceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_chunk_id: Option<String>,
}

/// Source text backing graph evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub chunk_id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    /// Sorted by score descending, ties by id ascending.
    pub units: Vec<EvidenceUnit>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub passages: Vec<Passage>,
    pub elapsed_ms: f64,
    pub backend_name: String,
}

impl RetrievalResult {
    pub fn empty(query: &str, backend_name: &str) -> Self {
        Self {
            query: query.to_string(),
            units: Vec::new(),
            passages: Vec::new(),
            elapsed_ms: 0.0,
            backend_name: backend_name.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("line {line}: empty document id")]
    EmptyId { line: usize },
    #[error("invalid chunk policy: {0}")]
    InvalidPolicy(String),
    #[error("cannot build {0} backend from an empty chunk list")]
    NoChunks(&'static str),
    #[error("embedding service: {0}")]
    Embedding(String),
    #[error("index version {found} is not supported (expected {expected})")]
    IndexVersion { found: u32, expected: u32 },
    #[error("index file: {0}")]
    IndexFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Error)]
#[error("backend {backend}: {message}")]
pub struct RetrievalError {
    pub backend: String,
    pub message: String,
}

impl RetrievalError {
    pub fn new(backend: &str, message: impl Into<String>) -> Self {
        Self {
            backend: backend.to_string(),
            message: message.into(),
        }
    }
}

/// A retrieval infrastructure. Implementations are immutable after build and
/// shared across episode workers.
pub trait KnowledgeBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Raw backend lookup. Callers should use [`retrieve`].
    fn search(&self, query: &str, top_k: usize) -> Result<RetrievalResult, RetrievalError>;

    /// Construction cost recorded at build time.
    fn build_cost(&self) -> CostReport {
        CostReport::default()
    }
}

/// Runs one retrieval against a backend.
///
/// `top_k` must be at least 1. A whitespace-only query returns an empty
/// result without touching the backend.
pub fn retrieve(
    backend: &dyn KnowledgeBackend,
    query: &str,
    top_k: usize,
) -> Result<RetrievalResult, RetrievalError> {
    if top_k == 0 {
        return Err(RetrievalError::new(backend.name(), "top_k must be at least 1"));
    }
    if query.trim().is_empty() {
        return Ok(RetrievalResult::empty(query, backend.name()));
    }
    let started = Instant::now();
    let mut result = backend.search(query, top_k)?;
    if result.units.iter().any(|u| !u.score.is_finite()) {
        return Err(RetrievalError::new(backend.name(), "non-finite score"));
    }
    sort_units(&mut result.units);
    result.units.truncate(top_k);
    result.elapsed_ms = started.elapsed().as_secs_f64() * 1000.0;
    Ok(result)
}

/// Score descending, then id ascending.
pub fn sort_units(units: &mut [EvidenceUnit]) {
    units.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
}
