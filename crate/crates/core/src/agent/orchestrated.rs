//! Decompose, retrieve per sub-query, draft, verify, expand.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::single_shot::single_shot_with;
use super::templates::{DECOMPOSE_TEXT, DECOMPOSE_TRIPLE, DEEP_ANSWER, EXPAND, OPEN_QA, VERIFY};
use super::{last_line, AgentError, CallStage, EpisodeContext, Pipeline, Recorder, Step, Termination, Trajectory};
use crate::knowledge::RetrievalResult;
use crate::llm::Message;
use crate::protocol::{extract_answer, extract_boxed, format_evidence, Dialect};
use crate::text::lexical_tokens;

/// Line appended to the decomposition prompt when the first reply was not JSON.
pub const JSON_ONLY: &str = "Output valid JSON only";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionMode {
    /// Natural-language sub-queries with `#k` placeholders.
    #[default]
    Text,
    /// Subject-relation-object triples with `Entity#k` placeholders.
    Triple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainEntry {
    pub sub_query: String,
    pub evidence: RetrievalResult,
    pub draft: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogicChain {
    pub entries: Vec<ChainEntry>,
}

impl LogicChain {
    /// Context block shown to the drafting, verification and expansion prompts.
    pub fn render(&self, unit_char_budget: usize) -> String {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                format!(
                    "Sub-query {n}: {}\n{}\nSub-answer {n}: {}",
                    e.sub_query,
                    format_evidence(&e.evidence, unit_char_budget),
                    e.draft.trim(),
                    n = i + 1
                )
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub verdict: Verdict,
    pub analysis: String,
}

/// Yes only when the last non-empty line is exactly "yes" once punctuation
/// and case are ignored. Anything else, including no text, is No.
pub fn parse_verdict(text: &str) -> Verdict {
    let line: String = last_line(text)
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !c.is_whitespace())
        .collect();
    if line.eq_ignore_ascii_case("yes") {
        Verdict::Yes
    } else {
        Verdict::No
    }
}

/// Rewrites tuple parentheses outside string literals as JSON arrays.
fn tuples_to_arrays(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_string = false;
    let mut escaped = false;
    for c in s.chars() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            out.push(c);
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            '(' => out.push('['),
            ')' => out.push(']'),
            _ => out.push(c),
        }
    }
    out
}

fn key_number(key: &str) -> usize {
    let digits: String = key
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().unwrap_or(usize::MAX)
}

fn render_triples(value: &serde_json::Value) -> Option<String> {
    let items = value.as_array()?;
    let triples: Vec<&Vec<serde_json::Value>> = if items.iter().all(|v| v.is_string()) {
        vec![items]
    } else {
        items.iter().map(|v| v.as_array()).collect::<Option<_>>()?
    };
    let rendered = triples
        .into_iter()
        .map(|t| {
            let parts = t.iter().map(|p| p.as_str().map(|s| format!("\"{s}\""))).collect::<Option<Vec<_>>>()?;
            Some(format!("({})", parts.join(", ")))
        })
        .collect::<Option<Vec<_>>>()?;
    (!rendered.is_empty()).then(|| rendered.join(", "))
}

/// Parses a decomposition reply into ordered sub-queries.
pub fn parse_decomposition(reply: &str, mode: DecompositionMode) -> Option<Vec<String>> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end < start {
        return None;
    }
    let body = &reply[start..=end];
    let body = match mode {
        DecompositionMode::Text => body.to_string(),
        DecompositionMode::Triple => tuples_to_arrays(body),
    };
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&body).ok()?;
    let mut entries: Vec<(usize, String)> = map
        .iter()
        .map(|(k, v)| {
            let q = match mode {
                DecompositionMode::Text => v.as_str().map(|s| s.trim().to_string()),
                DecompositionMode::Triple => render_triples(v),
            }?;
            (!q.is_empty()).then(|| (key_number(k), q))
        })
        .collect::<Option<_>>()?;
    entries.sort_by_key(|(n, _)| *n);
    (!entries.is_empty()).then(|| entries.into_iter().map(|(_, q)| q).collect())
}

/// Reads a Python-style list of string literals; JSON lists also parse.
pub fn parse_string_list(reply: &str) -> Option<Vec<String>> {
    let start = reply.find('[')?;
    let end = reply.rfind(']')?;
    if end < start {
        return None;
    }
    let body = &reply[start..=end];
    if let Ok(list) = serde_json::from_str::<Vec<String>>(body) {
        return Some(list);
    }
    let mut chars = body[1..body.len() - 1].chars().peekable();
    let mut out = Vec::new();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace() || *c == ',') {
            chars.next();
        }
        let Some(quote) = chars.next() else {
            return Some(out);
        };
        if quote != '\'' && quote != '"' {
            return None;
        }
        let mut s = String::new();
        loop {
            match chars.next()? {
                '\\' => match chars.next()? {
                    'n' => s.push('\n'),
                    't' => s.push('\t'),
                    other => s.push(other),
                },
                c if c == quote => break,
                c => s.push(c),
            }
        }
        out.push(s);
    }
}

/// Replaces each `#k` and `Entity#k` with the answer of sub-query `k`.
pub fn substitute_placeholders(sub_query: &str, answers: &BTreeMap<usize, String>) -> Result<String, AgentError> {
    const ENTITY: &str = "Entity";
    let mut out = String::with_capacity(sub_query.len());
    let mut rest = sub_query;
    while let Some(at) = rest.find('#') {
        let digits: String = rest[at + 1..].chars().take_while(char::is_ascii_digit).collect();
        if digits.is_empty() {
            out.push_str(&rest[..=at]);
            rest = &rest[at + 1..];
            continue;
        }
        let k: usize = digits.parse().map_err(|_| AgentError::Substitution(usize::MAX))?;
        let answer = answers.get(&k).ok_or(AgentError::Substitution(k))?;
        let prefix = &rest[..at];
        out.push_str(prefix.strip_suffix(ENTITY).unwrap_or(prefix));
        out.push_str(answer);
        rest = &rest[at + 1 + digits.len()..];
    }
    out.push_str(rest);
    Ok(out)
}

fn normalized(q: &str) -> String {
    lexical_tokens(q).join(" ")
}

fn decompose_with(rec: &mut Recorder<'_>, question: &str, mode: DecompositionMode) -> Result<Vec<String>, AgentError> {
    let template = match mode {
        DecompositionMode::Text => DECOMPOSE_TEXT,
        DecompositionMode::Triple => DECOMPOSE_TRIPLE,
    };
    let prompt = template.render(&[("query", question)])?;
    let reply = rec.call(CallStage::Decompose, vec![Message::user(prompt.clone())], vec![])?.text;
    if let Some(subs) = parse_decomposition(&reply, mode) {
        return Ok(subs);
    }
    let retry = format!("{prompt}\n{JSON_ONLY}");
    let reply = rec.call(CallStage::Decompose, vec![Message::user(retry)], vec![])?.text;
    parse_decomposition(&reply, mode).ok_or_else(|| AgentError::Decomposition(format!("unparseable reply: {reply:?}")))
}

/// Splits a question into ordered sub-queries, placeholders kept verbatim.
pub fn decompose(question: &str, ctx: EpisodeContext<'_>, mode: DecompositionMode) -> Result<Vec<String>, AgentError> {
    decompose_with(&mut Recorder::new(ctx), question, mode)
}

fn verify_with(rec: &mut Recorder<'_>, question: &str, chain: &LogicChain, draft: &str) -> Result<Verification, AgentError> {
    let context = chain.render(rec.ctx.settings.unit_char_budget);
    let prompt = VERIFY.render(&[("query", question), ("context_data", &context), ("model_response", draft)])?;
    let analysis = rec.call(CallStage::Verify, vec![Message::user(prompt)], vec![])?.text;
    Ok(Verification {
        verdict: parse_verdict(&analysis),
        analysis,
    })
}

pub fn verify_evidence(
    question: &str,
    chain: &LogicChain,
    draft: &str,
    ctx: EpisodeContext<'_>,
) -> Result<Verification, AgentError> {
    verify_with(&mut Recorder::new(ctx), question, chain, draft)
}

fn expand_with(
    rec: &mut Recorder<'_>,
    question: &str,
    chain: &LogicChain,
    draft: &str,
    analysis: &str,
) -> Result<Vec<String>, AgentError> {
    let context = chain.render(rec.ctx.settings.unit_char_budget);
    let prompt = EXPAND.render(&[
        ("query", question),
        ("context_data", &context),
        ("model_response", draft),
        ("evidence_verification", analysis),
    ])?;
    let reply = rec.call(CallStage::Expand, vec![Message::user(prompt)], vec![])?.text;
    let mut seen: BTreeSet<String> = chain.entries.iter().map(|e| normalized(&e.sub_query)).collect();
    Ok(parse_string_list(&reply)
        .unwrap_or_default()
        .into_iter()
        .map(|q| q.trim().to_string())
        .filter(|q| !q.is_empty() && seen.insert(normalized(q)))
        .collect())
}

/// New sub-queries for missing evidence; duplicates of earlier sub-queries
/// are dropped and an unreadable reply yields none.
pub fn expand_queries(
    question: &str,
    chain: &LogicChain,
    draft: &str,
    analysis: &str,
    ctx: EpisodeContext<'_>,
) -> Result<Vec<String>, AgentError> {
    expand_with(&mut Recorder::new(ctx), question, chain, draft, analysis)
}

fn draft_with(rec: &mut Recorder<'_>, query: &str, context: &str) -> Result<String, AgentError> {
    let prompt = DEEP_ANSWER.render(&[("query", query), ("context_data", context)])?;
    Ok(rec.call(CallStage::Draft, vec![Message::user(prompt)], vec![])?.text)
}

fn extract_final(rec: &mut Recorder<'_>, question: &str, chain: &LogicChain, draft: &str) -> Option<String> {
    let task = OPEN_QA.render(&[("question", question)]).expect("static template");
    let context = chain.render(rec.ctx.settings.unit_char_budget);
    let prompt = format!("Context Data:\n{context}\n\nModel Response:\n{draft}\n\n{task}");
    let fallback = || Some(last_line(draft).to_string()).filter(|a| !a.is_empty());
    match rec.call(CallStage::Extract, vec![Message::user(prompt)], vec![]) {
        Ok(c) => extract_boxed(&c.text)
            .or_else(|| extract_answer(&c.text, &Dialect::ANGLE))
            .or_else(|| Some(last_line(&c.text).to_string()).filter(|a| !a.is_empty()))
            .or_else(fallback),
        Err(e) => {
            rec.notes.push(format!("answer extraction failed: {e}"));
            fallback()
        }
    }
}

fn think(text: &str) -> Step {
    Step::new(format!("<think>{text}</think>\n\n"), &Dialect::ANGLE, None)
}

fn orchestrate(
    rec: &mut Recorder<'_>,
    question: &str,
    subs: Vec<String>,
    steps: &mut Vec<Step>,
) -> Result<(Option<String>, Termination), AgentError> {
    let dialect = Dialect::ANGLE;
    let char_budget = rec.ctx.settings.unit_char_budget;
    let turns = rec.budget().max_search_turns;
    let mut pending = subs;
    if pending.len() > turns {
        rec.notes.push(format!("decomposition produced {} sub-queries; kept {turns}", pending.len()));
        pending.truncate(turns);
    }
    let mut reverifications_left = turns - pending.len();
    let mut chain = LogicChain::default();
    let mut answers = BTreeMap::new();

    loop {
        for sub in std::mem::take(&mut pending) {
            if rec.searches_left() == 0 {
                break;
            }
            let k = chain.entries.len() + 1;
            let concrete = substitute_placeholders(&sub, &answers).unwrap_or_else(|e| {
                rec.notes.push(format!("sub-query {k}: {e}"));
                sub.clone()
            });
            let result = rec.retrieve(&concrete);
            let evidence = format_evidence(&result, char_budget);
            rec.inserted(&evidence);
            let retrieved = format!("<search>{concrete}</search>\n\n<information>{evidence}</information>\n\n");
            let draft = match draft_with(rec, &concrete, &evidence) {
                Ok(d) => d,
                Err(e) => {
                    // keep the retrieval on record even though its draft never came
                    steps.push(Step::new(retrieved, &dialect, Some(result)));
                    return Err(e);
                }
            };
            answers.insert(k, last_line(&draft).to_string());
            steps.push(Step::new(format!("{retrieved}<think>{draft}</think>\n\n"), &dialect, Some(result.clone())));
            chain.entries.push(ChainEntry {
                sub_query: concrete,
                evidence: result,
                draft,
            });
        }

        let draft = draft_with(rec, question, &chain.render(char_budget))?;
        steps.push(think(&draft));
        let verification = verify_with(rec, question, &chain, &draft)?;
        steps.push(think(&verification.analysis));

        if verification.verdict == Verdict::Yes {
            let answer = extract_final(rec, question, &chain, &draft);
            return Ok((answer, Termination::Answered));
        }
        if reverifications_left == 0 || rec.searches_left() == 0 {
            rec.notes.push("verification budget exhausted; forcing an answer".into());
            return Ok((extract_final(rec, question, &chain, &draft), Termination::BudgetExhausted));
        }
        let mut new = expand_with(rec, question, &chain, &draft, &verification.analysis)?;
        if new.is_empty() {
            rec.notes.push("expansion produced no new sub-queries; forcing an answer".into());
            return Ok((extract_final(rec, question, &chain, &draft), Termination::BudgetExhausted));
        }
        steps.push(think(&format!("Additional sub-queries: {}", new.join(" | "))));
        new.truncate(rec.searches_left());
        pending = new;
        reverifications_left -= 1;
    }
}

/// Decompose-retrieve-verify-expand workflow. Steps are recorded in
/// angle-tag form.
pub fn run_orchestrated(question: &str, ctx: EpisodeContext<'_>) -> Result<Trajectory, AgentError> {
    ctx.settings.budget.validate()?;
    let mut rec = Recorder::new(ctx);
    let mode = ctx.settings.decomposition;
    let prompt = match mode {
        DecompositionMode::Text => DECOMPOSE_TEXT,
        DecompositionMode::Triple => DECOMPOSE_TRIPLE,
    }
    .render(&[("query", question)])?;
    let on_error = |rec: &mut Recorder<'_>, e: AgentError| {
        rec.notes.push(format!("episode stopped: {e}"));
        if e.is_budget() {
            Termination::BudgetExhausted
        } else {
            Termination::ProtocolFailure
        }
    };

    let subs = match decompose_with(&mut rec, question, mode) {
        Ok(subs) => subs,
        Err(AgentError::Decomposition(why)) => {
            rec.notes.push(format!("decomposition failed, fell back to single-shot: {why}"));
            let (_, steps, answer, termination) = single_shot_with(&mut rec, question)?;
            return Ok(rec.finish(question, Pipeline::Orchestrated, Dialect::ANGLE.name, prompt, steps, answer, termination));
        }
        Err(e) => {
            let t = on_error(&mut rec, e);
            return Ok(rec.finish(question, Pipeline::Orchestrated, Dialect::ANGLE.name, prompt, vec![], None, t));
        }
    };

    let mut steps = Vec::new();
    let (answer, termination) = match orchestrate(&mut rec, question, subs, &mut steps) {
        Ok(done) => done,
        Err(e) => (None, on_error(&mut rec, e)),
    };
    if let Some(a) = &answer {
        steps.push(Step::new(format!("<answer>{a}</answer>"), &Dialect::ANGLE, None));
    }
    Ok(rec.finish(question, Pipeline::Orchestrated, Dialect::ANGLE.name, prompt, steps, answer, termination))
}
