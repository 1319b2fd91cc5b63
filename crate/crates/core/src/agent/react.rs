//! The think / search / information / answer loop.

use super::templates::{with_cot_hint, GRAPH_R1, OPEN_QA, REASON_IN_DOCUMENTS, SEARCH_O1, SEARCH_R1};
use super::{AgentError, CallStage, EpisodeContext, Pipeline, Recorder, Step, Termination, Trajectory};
use crate::knowledge::RetrievalResult;
use crate::llm::Message;
use crate::protocol::{
    detect_action_boundary, extract_answer, extract_boxed, format_evidence, wrap_information, BoundaryKind, Dialect,
    DialectName,
};

/// Refinement result when the retrieved documents are empty.
pub const NO_HELPFUL_INFORMATION: &str = "No helpful information found.";

/// Start of the message sent once the search budget is spent.
pub const FORCE_ANSWER: &str = "Based on the above, answer now";

/// Start of the message sent after a completion with no usable tag.
pub const FORMAT_REMINDER: &str = "Your last reply contained neither a search nor a final answer.";

const REFINE_MARKER: &str = "Final Information";

fn answer_format(dialect: &Dialect) -> String {
    match dialect.name {
        DialectName::PipeTag => "in the format \\boxed{YOUR_ANSWER}".to_string(),
        _ => format!("inside {} and {}", dialect.answer_open, dialect.answer_close),
    }
}

fn force_answer_message(dialect: &Dialect) -> String {
    format!("{FORCE_ANSWER}. Provide your final answer {}.", answer_format(dialect))
}

fn format_reminder_message(dialect: &Dialect) -> String {
    format!(
        "{FORMAT_REMINDER} Either search with {} query {}, or give your final answer {}.",
        dialect.action_open,
        dialect.action_close,
        answer_format(dialect)
    )
}

/// Re-appends the closing delimiter that a stop sequence cut off.
fn restore_close(text: &str, dialect: &Dialect) -> String {
    let latest = [
        (dialect.action_open, dialect.action_close),
        (dialect.answer_open, dialect.answer_close),
    ]
    .into_iter()
    .filter_map(|(open, close)| text.rfind(open).map(|at| (at, open, close)))
    .max_by_key(|(at, _, _)| *at);
    match latest {
        Some((at, open, close)) if !text[at + open.len()..].contains(close) => format!("{text}{close}"),
        _ => text.to_string(),
    }
}

/// Query-tag actions may carry `{"query": "..."}` instead of bare text.
fn search_payload(payload: &str, dialect: &Dialect) -> String {
    if dialect.name == DialectName::QueryTag && payload.starts_with('{') {
        if let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(payload) {
            if let Some(serde_json::Value::String(q)) = map.get("query") {
                return q.trim().to_string();
            }
        }
    }
    payload.to_string()
}

fn conversation(prompt: &str, transcript: &str) -> Vec<Message> {
    let mut messages = vec![Message::user(prompt)];
    if !transcript.is_empty() {
        messages.push(Message::assistant(transcript));
    }
    messages
}

fn on_demand_prompt(question: &str, ctx: &EpisodeContext<'_>) -> Result<String, AgentError> {
    let limit = ctx.settings.budget.max_search_turns.to_string();
    let instruction = SEARCH_O1.render(&[("MAX_SEARCH_LIMIT", &limit), ("question", question)])?;
    let mut task = OPEN_QA.render(&[("question", question)])?;
    if ctx.settings.cot_hint {
        task = with_cot_hint(&task);
    }
    Ok(format!("{instruction}\n\n{task}"))
}

/// Compresses retrieved documents into the information relevant to the
/// current query.
pub fn refine_knowledge(
    prev_reasoning: &str,
    search_query: &str,
    docs: &RetrievalResult,
    ctx: EpisodeContext<'_>,
) -> Result<String, AgentError> {
    refine_with(&mut Recorder::new(ctx), prev_reasoning, search_query, docs)
}

fn refine_with(
    rec: &mut Recorder<'_>,
    prev_reasoning: &str,
    search_query: &str,
    docs: &RetrievalResult,
) -> Result<String, AgentError> {
    if docs.units.is_empty() && docs.passages.is_empty() {
        return Ok(NO_HELPFUL_INFORMATION.to_string());
    }
    let document = format_evidence(docs, rec.ctx.settings.unit_char_budget);
    let prompt = REASON_IN_DOCUMENTS.render(&[
        ("prev_reasoning", prev_reasoning),
        ("search_query", search_query),
        ("document", &document),
    ])?;
    let reply = rec.call(CallStage::Refine, vec![Message::user(prompt)], vec![])?.text;
    Ok(match reply.rfind(REFINE_MARKER) {
        Some(at) => reply[at + REFINE_MARKER.len()..].trim().to_string(),
        None => reply,
    })
}

/// Reasoning-driven search with knowledge refinement, pipe-tag dialect.
pub fn run_on_demand(question: &str, ctx: EpisodeContext<'_>) -> Result<Trajectory, AgentError> {
    ctx.settings.budget.validate()?;
    let prompt = on_demand_prompt(question, &ctx)?;
    Ok(run_loop(question, prompt, Pipeline::OnDemand, Dialect::PIPE, true, ctx))
}

/// Plain tagged loop used by trained policies; no refinement.
///
/// Only the angle-tag and query-tag dialects have a policy template; any
/// other dialect falls back to angle tags.
pub fn run_rl_dialect(question: &str, ctx: EpisodeContext<'_>, dialect: DialectName) -> Result<Trajectory, AgentError> {
    ctx.settings.budget.validate()?;
    let (pipeline, dialect, template) = match dialect {
        DialectName::QueryTag => (Pipeline::RlQuery, Dialect::QUERY, GRAPH_R1),
        _ => (Pipeline::RlAngle, Dialect::ANGLE, SEARCH_R1),
    };
    let prompt = template.render(&[("question", question)])?;
    Ok(run_loop(question, prompt, pipeline, dialect, false, ctx))
}

fn run_loop(
    question: &str,
    prompt: String,
    pipeline: Pipeline,
    dialect: Dialect,
    refine: bool,
    ctx: EpisodeContext<'_>,
) -> Trajectory {
    let mut rec = Recorder::new(ctx);
    let stops = vec![dialect.action_close.to_string(), dialect.answer_close.to_string()];
    let mut steps = Vec::new();
    let mut transcript = String::new();
    let mut reminded = false;
    let mut remind_next = false;

    let fail = |rec: &mut Recorder<'_>, e: AgentError| {
        rec.notes.push(format!("llm call failed: {e}"));
        if e.is_budget() {
            Termination::BudgetExhausted
        } else {
            Termination::ProtocolFailure
        }
    };

    let (answer, termination) = loop {
        let mut messages = conversation(&prompt, &transcript);
        let stage = if remind_next {
            messages.push(Message::user(format_reminder_message(&dialect)));
            CallStage::Reprompt
        } else {
            CallStage::Generate
        };
        remind_next = false;
        let text = match rec.call(stage, messages, stops.clone()) {
            Ok(c) => restore_close(&c.text, &dialect),
            Err(e) => break (None, fail(&mut rec, e)),
        };

        match detect_action_boundary(&text, &dialect) {
            Some(b) if b.kind == BoundaryKind::AnswerIssued => {
                steps.push(Step::new(text, &dialect, None));
                break (Some(b.payload), Termination::Answered);
            }
            Some(b) => {
                transcript.push_str(&text);
                steps.push(Step::new(text, &dialect, None));
                if rec.searches_left() == 0 {
                    rec.notes.push("search budget exhausted; forcing an answer".into());
                    let mut messages = conversation(&prompt, &transcript);
                    messages.push(Message::user(force_answer_message(&dialect)));
                    let reply = match rec.call(CallStage::ForceAnswer, messages, vec![dialect.answer_close.to_string()]) {
                        Ok(c) => restore_close(&c.text, &dialect),
                        Err(e) => {
                            fail(&mut rec, e);
                            break (None, Termination::BudgetExhausted);
                        }
                    };
                    let answer = extract_answer(&reply, &dialect);
                    steps.push(Step::new(reply, &dialect, None));
                    break (answer, Termination::BudgetExhausted);
                }
                let query = search_payload(&b.payload, &dialect);
                let result = rec.retrieve(&query);
                let body = if refine {
                    match refine_with(&mut rec, &transcript, &query, &result) {
                        Ok(body) => body,
                        Err(e) => {
                            steps.last_mut().expect("search step").retrieval = Some(result);
                            break (None, fail(&mut rec, e));
                        }
                    }
                } else {
                    format_evidence(&result, ctx.settings.unit_char_budget)
                };
                rec.inserted(&body);
                let info = format!("\n\n{}\n\n", wrap_information(&body, &dialect));
                transcript.push_str(&info);
                let step = steps.pop().expect("search step");
                steps.push(Step::new(step.text + &info, &dialect, Some(result)));
            }
            None => {
                let boxed = match dialect.name {
                    DialectName::PipeTag => extract_boxed(&text),
                    _ => None,
                };
                if !text.trim().is_empty() || boxed.is_some() {
                    transcript.push_str(&text);
                    steps.push(Step::new(text, &dialect, None));
                }
                if boxed.is_some() {
                    break (boxed, Termination::Answered);
                }
                if reminded {
                    rec.notes.push("no action or answer after format reminder".into());
                    break (None, Termination::BudgetExhausted);
                }
                reminded = true;
                remind_next = true;
            }
        }
    };
    rec.finish(question, pipeline, dialect.name, prompt, steps, answer, termination)
}
