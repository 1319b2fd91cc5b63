//! OpenAI-compatible `/v1/chat/completions` client with bounded retries.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{apply_stop, Completion, CompletionRequest, FinishReason, GatewayError, LanguageModel};
use crate::cost::count_tokens;
use crate::http::{HttpTransport, Limiter, TransportError, UreqTransport};
use crate::knowledge::EmbeddingClient;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenAiConfig {
    pub base_url: String,
    /// Environment variable holding the API key. Unset or empty means no
    /// Authorization header.
    pub api_key_env: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub parallelism: usize,
    /// First backoff delay; doubles on every retry.
    pub backoff_ms: u64,
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            model: "Qwen2.5-7B-Instruct".into(),
            timeout_secs: 120.0,
            max_retries: 3,
            parallelism: 4,
            backoff_ms: 500,
        }
    }
}

pub struct OpenAiClient {
    config: OpenAiConfig,
    api_key: Option<String>,
    transport: Arc<dyn HttpTransport>,
    limiter: Limiter,
    retries: AtomicU64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Vec<TokenLogprob>,
}

#[derive(Debug, Deserialize)]
struct TokenLogprob {
    logprob: f64,
}

#[derive(Debug, Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

enum Attempt {
    Done(Completion),
    Retry(String),
    Fatal(GatewayError),
}

impl OpenAiClient {
    pub fn new(config: OpenAiConfig) -> Self {
        Self::with_transport(config, Arc::new(UreqTransport))
    }

    pub fn with_transport(config: OpenAiConfig, transport: Arc<dyn HttpTransport>) -> Self {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        Self {
            limiter: Limiter::new(config.parallelism),
            config,
            api_key,
            transport,
            retries: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &OpenAiConfig {
        &self.config
    }

    /// Total retries performed by this client so far.
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::SeqCst)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.config.timeout_secs)
    }

    fn body(&self, request: &CompletionRequest) -> Value {
        let model = if request.model.is_empty() {
            &self.config.model
        } else {
            &request.model
        };
        let mut body = json!({
            "model": model,
            "messages": request.messages,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        });
        if !request.stop.is_empty() {
            body["stop"] = json!(request.stop);
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        if request.logprobs {
            body["logprobs"] = json!(true);
        }
        body
    }

    fn attempt(&self, request: &CompletionRequest, body: &Value) -> Attempt {
        let reply = match self.transport.post_json(
            &self.url("/v1/chat/completions"),
            self.api_key.as_deref(),
            body,
            self.timeout(),
        ) {
            Ok(r) => r,
            Err(e @ (TransportError::Timeout(_) | TransportError::Connection(_))) => {
                return Attempt::Retry(e.to_string())
            }
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        match reply.status {
            200 => {}
            401 | 403 => return Attempt::Fatal(GatewayError::Auth(reply.body)),
            408 | 409 | 429 | 500..=599 => {
                return Attempt::Retry(format!("status {}: {}", reply.status, reply.body))
            }
            status => {
                return Attempt::Fatal(GatewayError::Status {
                    status,
                    body: reply.body,
                })
            }
        }
        match parse_completion(&reply.body, request) {
            Ok(c) => Attempt::Done(c),
            Err(e) => Attempt::Fatal(e),
        }
    }
}

fn parse_completion(body: &str, request: &CompletionRequest) -> Result<Completion, GatewayError> {
    let parsed: ChatResponse =
        serde_json::from_str(body).map_err(|e| GatewayError::Protocol(e.to_string()))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::Protocol("no choices".into()))?;
    let raw = choice.message.content.unwrap_or_default();
    let (text, cut) = apply_stop(&raw, &request.stop);
    let finish_reason = if cut {
        FinishReason::Stop
    } else {
        match choice.finish_reason.as_deref() {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            _ => FinishReason::Other,
        }
    };
    let (prompt_tokens, completion_tokens) = match parsed.usage {
        Some(u) => (u.prompt_tokens, u.completion_tokens),
        None => (request.prompt_tokens(), count_tokens(text)),
    };
    Ok(Completion {
        text: text.to_string(),
        finish_reason,
        prompt_tokens,
        completion_tokens,
        token_logprobs: choice
            .logprobs
            .map(|l| l.content.into_iter().map(|t| t.logprob).collect()),
    })
}

impl LanguageModel for OpenAiClient {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        request.validate()?;
        let body = self.body(request);
        let _permit = self.limiter.acquire();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request, &body) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(cause) => {
                    if attempts > self.config.max_retries {
                        return Err(GatewayError::Exhausted { attempts, cause });
                    }
                    let delay = self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
                    warn!("chat completion attempt {attempts} failed ({cause}); retrying in {delay} ms");
                    self.retries.fetch_add(1, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
        }
    }

    fn health_check(&self) -> Result<(), GatewayError> {
        let reply = self
            .transport
            .get(&self.url("/v1/models"), self.api_key.as_deref(), self.timeout())
            .map_err(|e| GatewayError::Unreachable(format!("{}: {e}", self.config.base_url)))?;
        debug!("health check {} -> {}", self.config.base_url, reply.status);
        match reply.status {
            401 | 403 => Err(GatewayError::Auth(reply.body)),
            _ => Ok(()),
        }
    }
}

/// OpenAI-compatible `/v1/embeddings` client for dense embedding mode.
pub struct OpenAiEmbeddingClient {
    config: OpenAiConfig,
    api_key: Option<String>,
    transport: Arc<dyn HttpTransport>,
}

impl OpenAiEmbeddingClient {
    pub fn new(config: OpenAiConfig) -> Self {
        Self::with_transport(config, Arc::new(UreqTransport))
    }

    pub fn with_transport(config: OpenAiConfig, transport: Arc<dyn HttpTransport>) -> Self {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        Self {
            config,
            api_key,
            transport,
        }
    }
}

#[derive(Debug, Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingRow>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingRow {
    index: usize,
    embedding: Vec<f32>,
}

impl EmbeddingClient for OpenAiEmbeddingClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, String> {
        let url = format!("{}/v1/embeddings", self.config.base_url.trim_end_matches('/'));
        let body = json!({ "model": self.config.model, "input": texts });
        let reply = self
            .transport
            .post_json(
                &url,
                self.api_key.as_deref(),
                &body,
                Duration::from_secs_f64(self.config.timeout_secs),
            )
            .map_err(|e| e.to_string())?;
        if reply.status != 200 {
            return Err(format!("status {}: {}", reply.status, reply.body));
        }
        let mut parsed: EmbeddingResponse =
            serde_json::from_str(&reply.body).map_err(|e| e.to_string())?;
        parsed.data.sort_by_key(|r| r.index);
        Ok(parsed.data.into_iter().map(|r| r.embedding).collect())
    }
}
