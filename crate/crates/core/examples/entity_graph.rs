//! Build an entity graph with the rule extractor and inspect what a query
//! pulls out of it.

use agentic_search::knowledge::{
    build_entity_graph_backend, retrieve, Chunk, Extractor, GraphConfig, KnowledgeBackend, RuleExtractor,
};

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
    let chunks = vec![
        chunk("laleli", "Laleli Mosque is located in Laleli."),
        chunk("fatih", "Laleli is part of Fatih. Fatih is a district of Istanbul."),
        chunk("esma", "Esma Sultan Mansion is located in Ortakoy."),
        chunk("ortakoy", "Ortakoy is part of Besiktas."),
    ];
    let extractor = Extractor::Rule(RuleExtractor::default());
    let two_hops = GraphConfig { hops: 2 };
    let backend = build_entity_graph_backend(chunks, &extractor, two_hops)?;

    let graph = backend.graph();
    println!("{} nodes, {} edges, {} llm calls", graph.nodes.len(), graph.edges.len(), backend.build_cost().llm_calls);
    for e in &graph.edges {
        println!("  ({}, {}, {})  from {}", e.src, e.relation, e.dst, e.source_chunk_id);
    }

    let result = retrieve(&backend, "Laleli Mosque", 5)?;
    println!("\nLaleli Mosque, {} hops:", backend.hops());
    for u in &result.units {
        println!("  {:.2}  {}", u.score, u.text);
    }
    Ok(())
}
