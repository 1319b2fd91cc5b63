//! Replay three recorded reasoning transcripts against a small landmark
//! corpus: prompted on-demand search, the angle-tag RL dialect over a dense
//! index, and the query-tag RL dialect over an entity graph.

use agentic_search::agent::{run_pipeline, AgentSettings, EpisodeContext, Pipeline};
use agentic_search::knowledge::{
    build_dense_backend, build_entity_graph_backend, Chunk, DenseScorer, Extractor, GraphConfig, KnowledgeBackend,
    RuleExtractor,
};
use agentic_search::llm::ScriptedModel;

const QUESTION: &str = "Are the Laleli Mosque and Esma Sultan Mansion located in the same neighborhood?";

fn chunk(id: &str, title: &str, text: &str) -> Chunk {
    Chunk {
        chunk_id: id.into(),
        doc_id: id.into(),
        title: title.into(),
        text: text.into(),
        ordinal: 0,
        token_range: (0, text.split_whitespace().count()),
    }
}

fn corpus() -> Vec<Chunk> {
    vec![
        chunk("laleli", "Laleli Mosque", "Laleli Mosque is located in Laleli. The Laleli Mosque is an 18th-century Ottoman imperial mosque in Laleli, Fatih, Istanbul, Turkey."),
        chunk("esma", "Esma Sultan Mansion", "Esma Sultan Mansion is located in Ortakoy. The Esma Sultan Mansion is a historical yali on the Bosphorus in the Ortakoy neighborhood of Istanbul, Turkey."),
        chunk("fatih", "Fatih", "Laleli is part of Fatih. Fatih is a district of Istanbul."),
    ]
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dense = build_dense_backend(corpus(), DenseScorer::Lexical)?;
    let graph = build_entity_graph_backend(corpus(), &Extractor::Rule(RuleExtractor::default()), GraphConfig::default())?;
    let settings = AgentSettings::default();

    let runs: [(Pipeline, &dyn KnowledgeBackend, Vec<&str>); 3] = [
        (
            Pipeline::OnDemand,
            &dense,
            vec![
                "I need the locations of both structures.<|begin_search_query|> location of Laleli Mosque <|end_search_query|>",
                "Final Information\nThe Laleli Mosque is located in Laleli, Fatih, Istanbul, Turkey.",
                "The mosque is in Laleli while the mansion is in Ortakoy.\n\\boxed{No}",
            ],
        ),
        (
            Pipeline::RlAngle,
            &dense,
            vec![
                "<think>I need the location of Esma Sultan Mansion.</think>\n<search> Esma Sultan Mansion location Istanbul Turkey </search>",
                "<think>Laleli Mosque is in Laleli; Esma Sultan Mansion is in Ortakoy.</think>\n\n<answer> No </answer>",
            ],
        ),
        (
            Pipeline::RlQuery,
            &graph,
            vec![
                "<think>\nFirst the mosque.\n</think>\n\n<query>\n{\"query\": \"Laleli Mosque neighborhood\"}\n</query>",
                "<think>\nNow the mansion.\n</think>\n<query>\n{\"query\": \"Esma Sultan Mansion neighborhood\"}\n</query>",
                "<think>\nOrtakoy is not Laleli.\n</think>\n\n<answer> No </answer>",
            ],
        ),
    ];

    for (pipeline, backend, replies) in runs {
        let model = ScriptedModel::from_replies(replies)?;
        let t = run_pipeline(pipeline, QUESTION, EpisodeContext { backend, model: &model, settings: &settings })?;
        println!("== {} ({} searches, {} calls): {:?} {:?}", pipeline.as_str(), t.search_turns(), t.cost.llm_calls, t.termination, t.final_answer);
        println!("{}\n", t.text());
    }
    Ok(())
}
