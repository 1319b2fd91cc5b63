//! Language-model gateway: an OpenAI-compatible chat client and a scripted
//! offline model behind one trait.

mod openai;
mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::count_tokens;

pub use openai::{OpenAiClient, OpenAiConfig, OpenAiEmbeddingClient};
pub use scripted::{prompt_hash, Rule, RuleMatch, ScriptedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub logprobs: bool,
}

impl CompletionRequest {
    /// Greedy request with no stop sequences.
    pub fn new(model: &str, messages: Vec<Message>) -> Self {
        Self {
            model: model.to_string(),
            messages,
            max_tokens: 1024,
            temperature: 0.0,
            stop: Vec::new(),
            seed: None,
            logprobs: false,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// Whitespace-token size of all message contents.
    pub fn prompt_tokens(&self) -> u64 {
        self.messages.iter().map(|m| count_tokens(&m.content)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub token_logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("gave up after {attempts} attempt(s): {cause}")]
    Exhausted { attempts: u32, cause: String },
    #[error("status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("scripted model: {0}")]
    Script(String),
    #[error("unreachable: {0}")]
    Unreachable(String),
}

/// Anything that turns a chat request into a completion.
pub trait LanguageModel: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError>;

    /// Cheap reachability probe run before a batch starts.
    fn health_check(&self) -> Result<(), GatewayError> {
        Ok(())
    }
}

/// Cuts `text` at the earliest occurrence of any stop sequence.
/// Returns the kept prefix and whether a cut happened.
pub fn apply_stop<'a>(text: &'a str, stop: &[String]) -> (&'a str, bool) {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    match cut {
        Some(at) => (&text[..at], true),
        None => (text, false),
    }
}
