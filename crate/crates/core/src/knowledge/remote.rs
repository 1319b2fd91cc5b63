//! Client for retrieval services speaking the JSON retrieval protocol:
//!
//! ```text
//! POST {endpoint}/retrieve  {"query": "...", "top_k": 5}
//! 200 {"results": [{"id": "...", "title": "...", "text": "...", "score": 0.9}]}
//! ```

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{EvidenceKind, EvidenceUnit, KnowledgeBackend, RetrievalError, RetrievalResult};
use crate::http::{HttpTransport, Limiter, UreqTransport};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub timeout_secs: f64,
    /// Maximum in-flight requests from this client.
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            timeout_secs: 30.0,
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    results: Vec<WireUnit>,
}

#[derive(Debug, Deserialize)]
struct WireUnit {
    id: String,
    #[serde(default)]
    title: String,
    text: String,
    score: f64,
}

pub struct RemoteBackend {
    name: String,
    url: String,
    config: RemoteConfig,
    transport: Arc<dyn HttpTransport>,
    limiter: Limiter,
}

impl RemoteBackend {
    pub fn with_transport(
        endpoint: &str,
        name: &str,
        config: RemoteConfig,
        transport: Arc<dyn HttpTransport>,
    ) -> Self {
        Self {
            name: name.to_string(),
            url: format!("{}/retrieve", endpoint.trim_end_matches('/')),
            limiter: Limiter::new(config.max_in_flight),
            config,
            transport,
        }
    }
}

pub fn remote_backend(endpoint: &str, name: &str, config: RemoteConfig) -> RemoteBackend {
    RemoteBackend::with_transport(endpoint, name, config, Arc::new(UreqTransport))
}

impl KnowledgeBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn search(&self, query: &str, top_k: usize) -> Result<RetrievalResult, RetrievalError> {
        let _permit = self.limiter.acquire();
        let body = json!({ "query": query, "top_k": top_k });
        let reply = self
            .transport
            .post_json(
                &self.url,
                None,
                &body,
                Duration::from_secs_f64(self.config.timeout_secs),
            )
            .map_err(|e| RetrievalError::new(&self.name, e.to_string()))?;
        if reply.status != 200 {
            return Err(RetrievalError::new(
                &self.name,
                format!("status {}", reply.status),
            ));
        }
        let wire: WireResponse = serde_json::from_str(&reply.body)
            .map_err(|e| RetrievalError::new(&self.name, format!("malformed response: {e}")))?;
        let mut result = RetrievalResult::empty(query, &self.name);
        result.units = wire
            .results
            .into_iter()
            .map(|u| EvidenceUnit {
                doc_id: u.id.clone(),
                id: u.id,
                title: u.title,
                text: u.text,
                score: u.score,
                kind: EvidenceKind::Chunk,
                source_chunk_id: None,
            })
            .collect();
        Ok(result)
    }
}
