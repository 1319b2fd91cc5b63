//! Talk to an OpenAI-compatible chat server. Point it at one with
//! `OPENAI_BASE_URL` (default http://localhost:8000) and `OPENAI_MODEL`;
//! the key, if any, is read from `OPENAI_API_KEY`.

use agentic_search::agent::templates::SEARCH_R1;
use agentic_search::llm::{CompletionRequest, LanguageModel, Message, OpenAiClient, OpenAiConfig};

fn main() {
    let config = OpenAiConfig {
        base_url: std::env::var("OPENAI_BASE_URL").unwrap_or_else(|_| "http://localhost:8000".into()),
        model: std::env::var("OPENAI_MODEL").unwrap_or_else(|_| "Qwen2.5-7B-Instruct".into()),
        api_key_env: "OPENAI_API_KEY".into(),
        max_retries: 2,
        ..OpenAiConfig::default()
    };
    let client = OpenAiClient::new(config.clone());
    if let Err(e) = client.health_check() {
        eprintln!("no server at {}: {e}", config.base_url);
        return;
    }

    let prompt = SEARCH_R1
        .render(&[("question", "Are the Laleli Mosque and Esma Sultan Mansion located in the same neighborhood?")])
        .expect("template");
    let request = CompletionRequest {
        stop: vec!["</search>".into(), "</answer>".into()],
        ..CompletionRequest::new(&config.model, vec![Message::user(prompt)])
    };
    match client.complete(&request) {
        Ok(c) => {
            println!("{}", c.text);
            println!("-- {:?}, {} tokens in, {} out, {} retries", c.finish_reason, c.prompt_tokens, c.completion_tokens, client.retries());
        }
        Err(e) => eprintln!("completion failed: {e}"),
    }
}
