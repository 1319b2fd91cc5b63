//! Single-file JSON persistence for locally built backends.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::dense::{DenseBackend, EmbeddingClient};
use super::graph::{EntityGraph, EntityGraphBackend, GraphConfig};
use super::{Chunk, KnowledgeBackend, KnowledgeError, RetrievalError, RetrievalResult};
use crate::cost::CostReport;

pub const INDEX_FORMAT: &str = "agentic-search-index";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexFile {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub cost: CostReport,
    pub chunks: Vec<Chunk>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vectors: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<EntityGraph>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_config: Option<GraphConfig>,
    #[serde(default)]
    pub skipped_chunks: usize,
}

/// A backend built in-process, either dense or entity-graph.
pub enum LocalBackend {
    Dense(DenseBackend),
    Graph(EntityGraphBackend),
}

impl KnowledgeBackend for LocalBackend {
    fn name(&self) -> &str {
        match self {
            LocalBackend::Dense(b) => b.name(),
            LocalBackend::Graph(b) => b.name(),
        }
    }

    fn search(&self, query: &str, top_k: usize) -> Result<RetrievalResult, RetrievalError> {
        match self {
            LocalBackend::Dense(b) => b.search(query, top_k),
            LocalBackend::Graph(b) => b.search(query, top_k),
        }
    }

    fn build_cost(&self) -> CostReport {
        match self {
            LocalBackend::Dense(b) => b.build_cost(),
            LocalBackend::Graph(b) => b.build_cost(),
        }
    }
}

impl From<DenseBackend> for LocalBackend {
    fn from(b: DenseBackend) -> Self {
        LocalBackend::Dense(b)
    }
}

impl From<EntityGraphBackend> for LocalBackend {
    fn from(b: EntityGraphBackend) -> Self {
        LocalBackend::Graph(b)
    }
}

impl LocalBackend {
    /// Construction cost, editable so callers can scrub measured times.
    pub fn cost_mut(&mut self) -> &mut CostReport {
        match self {
            LocalBackend::Dense(b) => &mut b.cost,
            LocalBackend::Graph(b) => &mut b.cost,
        }
    }

    pub fn to_index_file(&self) -> IndexFile {
        let mut file = IndexFile {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            kind: self.name().to_string(),
            cost: self.build_cost(),
            chunks: Vec::new(),
            vectors: None,
            graph: None,
            graph_config: None,
            skipped_chunks: 0,
        };
        match self {
            LocalBackend::Dense(b) => {
                file.chunks = b.chunks.clone();
                file.vectors = b.embedding_vectors().map(|v| v.to_vec());
            }
            LocalBackend::Graph(b) => {
                file.chunks = b.chunks.clone();
                file.graph = Some(b.graph.clone());
                file.graph_config = Some(b.config);
                file.skipped_chunks = b.skipped_chunks;
            }
        }
        file
    }
}

pub fn save_backend(backend: &LocalBackend, path: &Path) -> Result<(), KnowledgeError> {
    let json = serde_json::to_string(&backend.to_index_file())
        .map_err(|e| KnowledgeError::IndexFormat(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

/// Loads a persisted backend. Embedding indexes need the client used to
/// embed queries.
pub fn load_backend(
    path: &Path,
    embedder: Option<Arc<dyn EmbeddingClient>>,
) -> Result<LocalBackend, KnowledgeError> {
    let raw = fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| KnowledgeError::IndexFormat(e.to_string()))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(INDEX_FORMAT) {
        return Err(KnowledgeError::IndexFormat(format!(
            "{} is not an {INDEX_FORMAT} file",
            path.display()
        )));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != INDEX_VERSION {
        return Err(KnowledgeError::IndexVersion {
            found: version,
            expected: INDEX_VERSION,
        });
    }
    let file: IndexFile =
        serde_json::from_value(value).map_err(|e| KnowledgeError::IndexFormat(e.to_string()))?;
    match file.kind.as_str() {
        "dense-lexical" => Ok(DenseBackend::from_parts_lexical(file.chunks, file.cost).into()),
        "dense-embedding" => {
            let vectors = file
                .vectors
                .ok_or_else(|| KnowledgeError::IndexFormat("missing vectors".into()))?;
            let client = embedder.ok_or_else(|| {
                KnowledgeError::Embedding("an embedding client is required to load this index".into())
            })?;
            Ok(DenseBackend::from_parts_embedding(file.chunks, vectors, client, file.cost).into())
        }
        "entity-graph" => {
            let graph = file
                .graph
                .ok_or_else(|| KnowledgeError::IndexFormat("missing graph".into()))?;
            graph.validate().map_err(KnowledgeError::IndexFormat)?;
            Ok(EntityGraphBackend::from_parts(
                file.chunks,
                graph,
                file.graph_config.unwrap_or_default(),
                file.cost,
                file.skipped_chunks,
            )
            .into())
        }
        other => Err(KnowledgeError::IndexFormat(format!("unknown backend kind {other:?}"))),
    }
}
