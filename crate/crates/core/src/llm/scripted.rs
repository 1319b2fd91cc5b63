use std::collections::HashMap;
use std::sync::Mutex;

use super::{apply_stop, Completion, CompletionRequest, FinishReason, GatewayError, LanguageModel, Message};
use crate::cost::count_tokens;
use crate::text::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleMatch {
    /// Matches a request whose [`prompt_hash`] equals the key.
    Exact(u64),
    /// Matches the n-th call (0-based) made to the model.
    Step(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub matcher: RuleMatch,
    pub reply: String,
}

impl Rule {
    pub fn step(index: usize, reply: impl Into<String>) -> Self {
        Self {
            matcher: RuleMatch::Step(index),
            reply: reply.into(),
        }
    }

    pub fn exact(hash: u64, reply: impl Into<String>) -> Self {
        Self {
            matcher: RuleMatch::Exact(hash),
            reply: reply.into(),
        }
    }
}

/// FNV-1a 64 over every message as `role 0x1f content 0x1e`.
pub fn prompt_hash(messages: &[Message]) -> u64 {
    let mut buf = Vec::new();
    for m in messages {
        buf.extend_from_slice(m.role.as_str().as_bytes());
        buf.push(0x1f);
        buf.extend_from_slice(m.content.as_bytes());
        buf.push(0x1e);
    }
    fnv1a64(&buf)
}

/// Deterministic offline model replaying scripted replies.
///
/// Exact-prompt rules take precedence; otherwise the call index selects a
/// step rule. Stop sequences are honored like a real server would.
#[derive(Debug)]
pub struct ScriptedModel {
    exact: HashMap<u64, String>,
    steps: Vec<String>,
    state: Mutex<ScriptState>,
}

#[derive(Debug, Default)]
struct ScriptState {
    calls: usize,
    log: Vec<CompletionRequest>,
}

impl ScriptedModel {
    pub fn new(rules: Vec<Rule>) -> Result<Self, GatewayError> {
        if rules.is_empty() {
            return Err(GatewayError::Script("scenario has no rules".into()));
        }
        let mut exact = HashMap::new();
        let mut steps: Vec<(usize, String)> = Vec::new();
        for r in rules {
            match r.matcher {
                RuleMatch::Exact(h) => {
                    exact.insert(h, r.reply);
                }
                RuleMatch::Step(i) => steps.push((i, r.reply)),
            }
        }
        steps.sort_by_key(|(i, _)| *i);
        for (expected, (i, _)) in steps.iter().enumerate() {
            if *i != expected {
                return Err(GatewayError::Script(format!(
                    "step indices must be contiguous from 0; missing step {expected}"
                )));
            }
        }
        Ok(Self {
            exact,
            steps: steps.into_iter().map(|(_, r)| r).collect(),
            state: Mutex::new(ScriptState::default()),
        })
    }

    /// Step rules for `replies` in order.
    pub fn from_replies<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Result<Self, GatewayError> {
        Self::new(
            replies
                .into_iter()
                .enumerate()
                .map(|(i, r)| Rule::step(i, r))
                .collect(),
        )
    }

    pub fn calls(&self) -> usize {
        self.state.lock().expect("script state").calls
    }

    /// Every request received, in call order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.state.lock().expect("script state").log.clone()
    }
}

impl LanguageModel for ScriptedModel {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        request.validate()?;
        let mut state = self.state.lock().expect("script state");
        let index = state.calls;
        state.calls += 1;
        state.log.push(request.clone());
        let reply = self
            .exact
            .get(&prompt_hash(&request.messages))
            .or_else(|| self.steps.get(index))
            .ok_or_else(|| GatewayError::Script(format!("no rule for call {index}")))?;
        let (text, _) = apply_stop(reply, &request.stop);
        Ok(Completion {
            text: text.to_string(),
            finish_reason: FinishReason::Stop,
            prompt_tokens: request.prompt_tokens(),
            completion_tokens: count_tokens(text),
            token_logprobs: None,
        })
    }
}
