use super::templates::SINGLE_SHOT;
use super::{AgentError, CallStage, EpisodeContext, Pipeline, Recorder, Step, Termination, Trajectory};
use crate::llm::Message;
use crate::protocol::{extract_answer, extract_boxed, format_evidence, wrap_information, Dialect};

/// Retrieve once, then answer once.
///
/// An `<answer>` tag or `\boxed{}` is preferred; otherwise the whole reply is
/// taken as the answer, as plain retrieve-then-read systems do.
pub fn run_single_shot(question: &str, ctx: EpisodeContext<'_>) -> Result<Trajectory, AgentError> {
    ctx.settings.budget.validate()?;
    let mut rec = Recorder::new(ctx);
    let (prompt, steps, answer, termination) = single_shot_with(&mut rec, question)?;
    Ok(rec.finish(question, Pipeline::SingleShot, Dialect::ANGLE.name, prompt, steps, answer, termination))
}

pub(super) type Outcome = (String, Vec<Step>, Option<String>, Termination);

pub(super) fn single_shot_with(rec: &mut Recorder<'_>, question: &str) -> Result<Outcome, AgentError> {
    let dialect = Dialect::ANGLE;
    if rec.searches_left() == 0 {
        return Ok((String::new(), Vec::new(), None, Termination::BudgetExhausted));
    }
    let result = rec.retrieve(question);
    let evidence = format_evidence(&result, rec.ctx.settings.unit_char_budget);
    rec.inserted(&evidence);
    let info = wrap_information(&evidence, &dialect);
    let prompt = SINGLE_SHOT.render(&[("evidence", &info), ("question", question)])?;

    let (reply, termination, answer) = match rec.call(CallStage::Answer, vec![Message::user(prompt.clone())], vec![]) {
        Ok(c) => {
            let answer = extract_answer(&c.text, &dialect)
                .or_else(|| extract_boxed(&c.text))
                .or_else(|| Some(c.text.trim().to_string()).filter(|a| !a.is_empty()));
            let termination = if answer.is_some() {
                Termination::Answered
            } else {
                Termination::ProtocolFailure
            };
            (c.text, termination, answer)
        }
        Err(e) => {
            rec.notes.push(format!("llm call failed: {e}"));
            let t = if e.is_budget() {
                Termination::BudgetExhausted
            } else {
                Termination::ProtocolFailure
            };
            (String::new(), t, None)
        }
    };
    let steps = vec![Step::new(format!("{info}\n\n{reply}"), &dialect, Some(result))];
    Ok((prompt, steps, answer, termination))
}
