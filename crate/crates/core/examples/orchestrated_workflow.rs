//! The decompose, retrieve, verify and expand workflow, driven by a scripted
//! model. The first verification fails, which triggers one expansion round.

use agentic_search::agent::{run_pipeline, AgentSettings, EpisodeContext, Pipeline};
use agentic_search::knowledge::{build_dense_backend, Chunk, DenseScorer};
use agentic_search::llm::ScriptedModel;

fn chunk(id: &str, text: &str) -> Chunk {
    Chunk {
        chunk_id: id.into(),
        doc_id: id.into(),
        title: id.into(),
        text: text.into(),
        ordinal: 0,
        token_range: (0, text.split_whitespace().count()),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let backend = build_dense_backend(
        vec![
            chunk("turing", "Alan Turing was born in Maida Vale."),
            chunk("maida", "Maida Vale is part of London."),
            chunk("london", "London is located in England."),
        ],
        DenseScorer::Lexical,
    )?;
    let model = ScriptedModel::from_replies([
        // decomposition; #1 is replaced by the first sub-query's answer
        r#"{"Sub-query 1": "Where was Alan Turing born?", "Sub-query 2": "Which city contains #1?"}"#,
        "Alan Turing was born in Maida Vale.\nMaida Vale",
        "Maida Vale is part of London.\nLondon",
        // draft over the whole chain, then a failed verification
        "Turing was born in Maida Vale, which is in London.",
        "The chain never states the country.\nNo",
        // expansion adds one sub-query
        "['Which country is London in?']",
        "London is located in England.\nEngland",
        "Turing was born in Maida Vale, London, England.",
        "Every step is supported.\nYes",
        // final answer extraction
        "\\boxed{England}",
    ])?;
    let settings = AgentSettings::default();
    let ctx = EpisodeContext { backend: &backend, model: &model, settings: &settings };
    let t = run_pipeline(Pipeline::Orchestrated, "In which country was Alan Turing born?", ctx)?;

    println!("{:?} {:?} after {} searches and {} calls", t.termination, t.final_answer, t.search_turns(), t.cost.llm_calls);
    for c in &t.calls {
        println!("  {:?}: {} tokens in, {} out", c.stage, c.prompt_tokens, c.completion_tokens);
    }
    for note in &t.notes {
        println!("  note: {note}");
    }
    Ok(())
}
