//! Score answers, aggregate two seeded runs into a report, and merge reports
//! from different pipelines into one comparison grid.

use agentic_search::agent::Termination;
use agentic_search::cli::ReportGrid;
use agentic_search::cost::CostReport;
use agentic_search::eval::{aggregate, contain_em, f1, QuestionRow, RunOutput};

fn row(qid: &str, answer: &str, golds: &[String], turns: f64) -> QuestionRow {
    QuestionRow {
        qid: qid.into(),
        em: contain_em(answer, golds),
        f1: f1(answer, golds),
        turns,
        recall: None,
        answer: answer.into(),
        termination: Termination::Answered,
        cost: CostReport::default(),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let golds = |g: &str| vec![g.to_string()];
    for (pred, gold) in [("The answer is No", "No"), ("north", "no"), ("Barack Obama", "Obama"), ("London, England", "England")] {
        println!("{pred:>18} vs {gold:<8} EM {} F1 {:.3}", contain_em(pred, &golds(gold)), f1(pred, &golds(gold)));
    }

    let answers = [("q0", "No", "No"), ("q1", "England", "England"), ("q2", "Paris", "London")];
    let run = |seed: u64, flip: bool| RunOutput {
        seed,
        rows: answers
            .iter()
            .map(|(q, a, g)| row(q, if flip && *q == "q2" { "London" } else { a }, &golds(g), 2.0))
            .collect(),
    };
    let build = CostReport::default();
    let agentic = aggregate("sample", "rl-angle", "dense-lexical", &[run(0, false), run(1, true)], &build)?;
    let single = aggregate("sample", "single-shot", "dense-lexical", &[run(0, false), run(1, false)], &build)?;
    print!("\n{}", agentic.to_text());
    print!("\n{}", agentic.to_csv()?);

    let grid = ReportGrid::from_reports(&[agentic, single])?;
    print!("\n{}", grid.to_markdown());
    Ok(())
}
