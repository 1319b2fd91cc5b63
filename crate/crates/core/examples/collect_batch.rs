//! Sample a group of rollouts for one question, score them, and export the
//! group as a JSONL training batch.

use agentic_search::agent::{AgentSettings, EpisodeContext, Pipeline};
use agentic_search::grpo::{collect_group, export_batch, import_batch, GroupSpec};
use agentic_search::knowledge::{build_dense_backend, Chunk, DenseScorer};
use agentic_search::llm::ScriptedModel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = "Ada Lovelace was born in London. London is located in England.";
    let chunks = vec![Chunk {
        chunk_id: "ada".into(),
        doc_id: "ada".into(),
        title: "Ada Lovelace".into(),
        text: text.into(),
        ordinal: 0,
        token_range: (0, text.split_whitespace().count()),
    }];
    let backend = build_dense_backend(chunks, DenseScorer::Lexical)?;

    // Four rollouts in call order: a correct search-then-answer, a wrong
    // guess, a correct guess without search, and a malformed reply.
    let model = ScriptedModel::from_replies([
        "<think>Look it up.</think>\n<search>Ada Lovelace born</search>",
        "<think>London, England.</think>\n<answer>England</answer>",
        "<answer>France</answer>",
        "<think>I recall it.</think><answer>England</answer>",
        "<think>England",
        "<think>England</think>",
    ])?;
    let settings = AgentSettings::default();
    let ctx = EpisodeContext { backend: &backend, model: &model, settings: &settings };
    let spec = GroupSpec { group_size: 4, ..GroupSpec::default() };
    let batch = collect_group("In which country was Ada Lovelace born?", &["England".into()], Pipeline::RlAngle, ctx, &spec)?;

    for (i, t) in batch.trajectories.iter().enumerate() {
        println!(
            "rollout {i}: {:?} answer {:?} reward {:.2} advantage {:+.3} ({} of {} tokens trained)",
            t.termination,
            t.final_answer,
            batch.rewards[i],
            batch.advantages[i],
            batch.masks[i].active(),
            batch.masks[i].len()
        );
    }

    let path = std::env::temp_dir().join("agentic-search-batch.jsonl");
    let n = export_batch(&batch, &path)?;
    assert_eq!(import_batch(&path)?.rewards, batch.rewards);
    println!("\n{n} records written to {}", path.display());
    Ok(())
}
