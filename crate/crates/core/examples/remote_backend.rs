//! Serve a local index over the retrieval wire protocol and query it through
//! the remote client, the same way an external graph system would be plugged in.

use std::sync::Arc;
use std::thread;

use serde_json::{json, Value};

use agentic_search::knowledge::{build_dense_backend, remote_backend, retrieve, Chunk, DenseScorer, KnowledgeBackend, RemoteConfig};

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
    let index = Arc::new(build_dense_backend(
        vec![
            chunk("laleli", "Laleli Mosque is located in Laleli, Fatih, Istanbul."),
            chunk("esma", "Esma Sultan Mansion is located in Ortakoy, Istanbul."),
        ],
        DenseScorer::Lexical,
    )?);

    let server = tiny_http::Server::http("127.0.0.1:0").map_err(|e| e.to_string())?;
    let url = format!("http://{}", server.server_addr().to_ip().expect("tcp listener"));
    thread::spawn(move || {
        for mut request in server.incoming_requests() {
            let mut body = String::new();
            let _ = request.as_reader().read_to_string(&mut body);
            let req: Value = serde_json::from_str(&body).unwrap_or_default();
            let query = req["query"].as_str().unwrap_or("");
            let top_k = req["top_k"].as_u64().unwrap_or(5) as usize;
            let results: Vec<Value> = index
                .search(query, top_k)
                .map(|r| r.units)
                .unwrap_or_default()
                .iter()
                .map(|u| json!({"id": u.id, "title": u.title, "text": u.text, "score": u.score}))
                .collect();
            let reply = tiny_http::Response::from_string(json!({ "results": results }).to_string());
            let _ = request.respond(reply);
        }
    });

    let remote = remote_backend(&url, "served-dense", RemoteConfig::default());
    let result = retrieve(&remote, "Esma Sultan Mansion", 2)?;
    println!("POST {url}/retrieve");
    for u in &result.units {
        println!("  {:.4}  {}  {}", u.score, u.id, u.text);
    }
    Ok(())
}
