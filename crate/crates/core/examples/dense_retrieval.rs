//! Ingest a JSONL corpus, chunk it, build the lexical dense index, query it,
//! and round-trip the index through a file.

use std::path::Path;

use agentic_search::knowledge::{
    build_dense_backend, chunk_corpus, ingest_corpus_file, load_backend, retrieve, save_backend, ChunkPolicy,
    DenseScorer, LocalBackend,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = ingest_corpus_file(&Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data/corpus.jsonl"))?;
    let chunks = chunk_corpus(&corpus, ChunkPolicy::default())?;
    println!("{} documents, {} chunks", corpus.documents.len(), chunks.len());

    let backend: LocalBackend = build_dense_backend(chunks, DenseScorer::Lexical)?.into();
    for query in ["Laleli Mosque", "where was Ada Lovelace born"] {
        let result = retrieve(&backend, query, 3)?;
        println!("\n{query}");
        for u in &result.units {
            println!("  {:.4}  {}  {}", u.score, u.id, u.title);
        }
    }

    let dir = std::env::temp_dir().join("agentic-search-dense-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("index.json");
    save_backend(&backend, &path)?;
    let loaded = load_backend(&path, None)?;
    assert_eq!(retrieve(&loaded, "Fatih", 3)?.units, retrieve(&backend, "Fatih", 3)?.units);
    println!("\nindex saved to {} and reloaded", path.display());
    Ok(())
}
