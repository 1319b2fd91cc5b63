//! Episode engine: single-shot retrieval, the tagged search loop, and the
//! decompose/verify/expand workflow.

mod orchestrated;
mod react;
mod single_shot;
pub mod templates;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{count_tokens, CostReport};
use crate::knowledge::{retrieve, KnowledgeBackend, RetrievalResult, DEFAULT_TOP_K};
use crate::llm::{Completion, CompletionRequest, GatewayError, LanguageModel, Message};
use crate::protocol::{parse_segments, Dialect, DialectName, Segment, DEFAULT_UNIT_CHAR_BUDGET};

pub use orchestrated::{
    decompose, expand_queries, run_orchestrated, substitute_placeholders, verify_evidence,
    ChainEntry, DecompositionMode, LogicChain, Verdict, Verification,
};
pub use react::{refine_knowledge, run_on_demand, run_rl_dialect, FORCE_ANSWER, FORMAT_REMINDER, NO_HELPFUL_INFORMATION};
pub use single_shot::run_single_shot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeBudget {
    pub max_search_turns: usize,
    pub max_total_llm_calls: usize,
    pub max_context_tokens: u64,
}

impl Default for EpisodeBudget {
    fn default() -> Self {
        Self {
            max_search_turns: 5,
            max_total_llm_calls: 32,
            max_context_tokens: 32_768,
        }
    }
}

impl EpisodeBudget {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.max_search_turns == 0 || self.max_total_llm_calls == 0 || self.max_context_tokens == 0 {
            return Err(AgentError::InvalidBudget(*self));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    SingleShot,
    OnDemand,
    Orchestrated,
    RlAngle,
    RlQuery,
}

impl Pipeline {
    pub const ALL: [Pipeline; 5] = [
        Pipeline::SingleShot,
        Pipeline::OnDemand,
        Pipeline::Orchestrated,
        Pipeline::RlAngle,
        Pipeline::RlQuery,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::SingleShot => "single-shot",
            Pipeline::OnDemand => "on-demand",
            Pipeline::Orchestrated => "orchestrated",
            Pipeline::RlAngle => "rl-angle",
            Pipeline::RlQuery => "rl-query",
        }
    }
}

/// Knobs shared by every pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSettings {
    pub model: String,
    pub top_k: usize,
    pub budget: EpisodeBudget,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    /// Adds the step-by-step hint to the on-demand prompt.
    pub cot_hint: bool,
    pub decomposition: DecompositionMode,
    pub unit_char_budget: usize,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            model: String::new(),
            top_k: DEFAULT_TOP_K,
            budget: EpisodeBudget::default(),
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
            cot_hint: true,
            decomposition: DecompositionMode::Text,
            unit_char_budget: DEFAULT_UNIT_CHAR_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    BudgetExhausted,
    ProtocolFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStage {
    Answer,
    Generate,
    Refine,
    ForceAnswer,
    Reprompt,
    Decompose,
    Draft,
    Verify,
    Expand,
    Extract,
}

/// Token usage of one model call, as reported by the gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub stage: CallStage,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// Raw step text in the trajectory's dialect, evidence included.
    pub text: String,
    /// `parse_segments(text)`; spans are relative to `text`.
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalResult>,
}

impl Step {
    pub fn new(text: String, dialect: &Dialect, retrieval: Option<RetrievalResult>) -> Self {
        Self {
            segments: parse_segments(&text, dialect),
            text,
            retrieval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question: String,
    pub pipeline: Pipeline,
    pub dialect: DialectName,
    /// First user message of the episode; never part of the generated text.
    pub prompt: String,
    pub steps: Vec<Step>,
    pub final_answer: Option<String>,
    pub termination: Termination,
    pub cost: CostReport,
    pub calls: Vec<CallRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Trajectory {
    /// Concatenated step texts.
    pub fn text(&self) -> String {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }

    /// Step segments with spans shifted into [`text`](Self::text) offsets.
    pub fn segments(&self) -> Vec<Segment> {
        let mut offset = 0;
        let mut out = Vec::new();
        for step in &self.steps {
            out.extend(step.segments.iter().map(|s| Segment {
                span: (s.span.0 + offset, s.span.1 + offset),
                ..s.clone()
            }));
            offset += step.text.len();
        }
        out
    }

    pub fn retrievals(&self) -> impl Iterator<Item = &RetrievalResult> {
        self.steps.iter().filter_map(|s| s.retrieval.as_ref())
    }

    /// Number of retrieval-bearing steps.
    pub fn search_turns(&self) -> usize {
        self.retrievals().count()
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid budget {0:?}: every limit must be at least 1")]
    InvalidBudget(EpisodeBudget),
    #[error("llm call budget of {0} exhausted")]
    CallBudget(usize),
    #[error("context of {tokens} tokens exceeds budget of {limit}")]
    ContextBudget { tokens: u64, limit: u64 },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("decomposition failed: {0}")]
    Decomposition(String),
    #[error("no answer available for placeholder #{0}")]
    Substitution(usize),
    #[error(transparent)]
    Template(#[from] templates::TemplateError),
}

impl AgentError {
    /// Budget errors end an episode as exhausted rather than failed.
    pub fn is_budget(&self) -> bool {
        matches!(self, AgentError::CallBudget(_) | AgentError::ContextBudget { .. })
    }
}

/// What an episode runs against.
#[derive(Clone, Copy)]
pub struct EpisodeContext<'a> {
    pub backend: &'a dyn KnowledgeBackend,
    pub model: &'a dyn LanguageModel,
    pub settings: &'a AgentSettings,
}

/// Per-episode bookkeeping of calls, retrievals and inserted context.
pub(crate) struct Recorder<'a> {
    pub ctx: EpisodeContext<'a>,
    pub calls: Vec<CallRecord>,
    retrieval_seconds: Vec<f64>,
    context_tokens: Vec<u64>,
    pub notes: Vec<String>,
}

impl<'a> Recorder<'a> {
    pub fn new(ctx: EpisodeContext<'a>) -> Self {
        Self {
            ctx,
            calls: Vec::new(),
            retrieval_seconds: Vec::new(),
            context_tokens: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn budget(&self) -> &EpisodeBudget {
        &self.ctx.settings.budget
    }

    pub fn retrievals(&self) -> usize {
        self.retrieval_seconds.len()
    }

    pub fn searches_left(&self) -> usize {
        self.budget().max_search_turns.saturating_sub(self.retrievals())
    }

    pub fn call(
        &mut self,
        stage: CallStage,
        messages: Vec<Message>,
        stop: Vec<String>,
    ) -> Result<Completion, AgentError> {
        let budget = *self.budget();
        if self.calls.len() >= budget.max_total_llm_calls {
            return Err(AgentError::CallBudget(budget.max_total_llm_calls));
        }
        let s = self.ctx.settings;
        let request = CompletionRequest {
            max_tokens: s.max_tokens,
            temperature: s.temperature,
            stop,
            seed: s.seed,
            ..CompletionRequest::new(&s.model, messages)
        };
        let tokens = request.prompt_tokens();
        if tokens > budget.max_context_tokens {
            return Err(AgentError::ContextBudget {
                tokens,
                limit: budget.max_context_tokens,
            });
        }
        let completion = self.ctx.model.complete(&request)?;
        self.calls.push(CallRecord {
            stage,
            prompt_tokens: completion.prompt_tokens,
            completion_tokens: completion.completion_tokens,
        });
        Ok(completion)
    }

    /// One search turn. Failures are noted and yield an empty result so the
    /// episode can continue. Callers must check [`searches_left`](Self::searches_left).
    pub fn retrieve(&mut self, query: &str) -> RetrievalResult {
        assert!(self.searches_left() > 0, "retrieval beyond the search budget");
        let result = match retrieve(self.ctx.backend, query, self.ctx.settings.top_k) {
            Ok(r) => r,
            Err(e) => {
                self.notes.push(format!("retrieval failed: {e}"));
                RetrievalResult::empty(query, self.ctx.backend.name())
            }
        };
        self.retrieval_seconds.push(result.elapsed_ms / 1000.0);
        result
    }

    /// Records how much evidence text was placed into the model context.
    pub fn inserted(&mut self, evidence: &str) {
        self.context_tokens.push(count_tokens(evidence));
    }

    pub fn cost(&self) -> CostReport {
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        let ctx: Vec<f64> = self.context_tokens.iter().map(|&t| t as f64).collect();
        CostReport {
            llm_calls: self.calls.len() as u64,
            llm_tokens_in: self.calls.iter().map(|c| c.prompt_tokens).sum(),
            llm_tokens_out: self.calls.iter().map(|c| c.completion_tokens).sum(),
            retrieval_calls: self.retrievals() as u64,
            mean_retrieval_seconds: mean(&self.retrieval_seconds),
            mean_context_tokens: mean(&ctx),
            ..CostReport::default()
        }
    }

    pub fn finish(
        self,
        question: &str,
        pipeline: Pipeline,
        dialect: DialectName,
        prompt: String,
        steps: Vec<Step>,
        final_answer: Option<String>,
        termination: Termination,
    ) -> Trajectory {
        Trajectory {
            question: question.to_string(),
            pipeline,
            dialect,
            prompt,
            steps,
            final_answer,
            termination,
            cost: self.cost(),
            calls: self.calls,
            notes: self.notes,
        }
    }
}

/// Runs one episode of `pipeline`.
pub fn run_pipeline(pipeline: Pipeline, question: &str, ctx: EpisodeContext<'_>) -> Result<Trajectory, AgentError> {
    match pipeline {
        Pipeline::SingleShot => run_single_shot(question, ctx),
        Pipeline::OnDemand => run_on_demand(question, ctx),
        Pipeline::Orchestrated => run_orchestrated(question, ctx),
        Pipeline::RlAngle => run_rl_dialect(question, ctx, DialectName::AngleTag),
        Pipeline::RlQuery => run_rl_dialect(question, ctx, DialectName::QueryTag),
    }
}

/// Last non-empty line, trimmed.
pub(crate) fn last_line(text: &str) -> &str {
    text.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}
