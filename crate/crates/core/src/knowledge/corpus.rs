use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::KnowledgeError;
use crate::cost::count_tokens;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub contents: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    /// Sum of whitespace tokens over all documents.
    pub token_count: u64,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self, KnowledgeError> {
        let mut seen = HashSet::new();
        for (i, d) in documents.iter().enumerate() {
            if d.id.is_empty() {
                return Err(KnowledgeError::EmptyId { line: i + 1 });
            }
            if !seen.insert(d.id.as_str()) {
                return Err(KnowledgeError::DuplicateId(d.id.clone()));
            }
        }
        let token_count = documents.iter().map(|d| count_tokens(&d.contents)).sum();
        Ok(Self {
            documents,
            token_count,
        })
    }
}

/// Reads a corpus with one JSON object per line (`id`, `contents`, optional
/// `title`). Blank lines are skipped; line numbers in errors are 1-based.
pub fn ingest_corpus<R: BufRead>(source: R) -> Result<Corpus, KnowledgeError> {
    let mut documents = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(&line).map_err(|e| KnowledgeError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        if doc.id.is_empty() {
            return Err(KnowledgeError::EmptyId { line: line_no });
        }
        if !seen.insert(doc.id.clone()) {
            return Err(KnowledgeError::DuplicateId(doc.id));
        }
        documents.push(doc);
    }
    let token_count = documents.iter().map(|d| count_tokens(&d.contents)).sum();
    Ok(Corpus {
        documents,
        token_count,
    })
}

pub fn ingest_corpus_file(path: &Path) -> Result<Corpus, KnowledgeError> {
    ingest_corpus(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPolicy {
    pub max_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self {
            max_tokens: 100,
            overlap_tokens: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub ordinal: usize,
    /// Whitespace-token window `[start, end)` within the document.
    pub token_range: (usize, usize),
}

/// Sliding-window chunking over whitespace tokens.
///
/// Windows advance by `max_tokens - overlap_tokens` and stop once a window
/// reaches the end of the document. A chunk's text is the original slice of
/// the document from its first token to its last, so inner whitespace is
/// preserved. Chunk ids are `{doc_id}#{ordinal:04}` so lexical order follows
/// ordinal order.
pub fn chunk_corpus(corpus: &Corpus, policy: ChunkPolicy) -> Result<Vec<Chunk>, KnowledgeError> {
    if policy.max_tokens == 0 || policy.overlap_tokens >= policy.max_tokens {
        return Err(KnowledgeError::InvalidPolicy(format!(
            "need max_tokens > overlap_tokens >= 0, got max {} overlap {}",
            policy.max_tokens, policy.overlap_tokens
        )));
    }
    let step = policy.max_tokens - policy.overlap_tokens;
    let mut chunks = Vec::new();
    for doc in &corpus.documents {
        let spans = token_spans(&doc.contents);
        let n = spans.len();
        let mut start = 0;
        let mut ordinal = 0;
        while start < n {
            let end = (start + policy.max_tokens).min(n);
            let text = &doc.contents[spans[start].0..spans[end - 1].1];
            chunks.push(Chunk {
                chunk_id: format!("{}#{:04}", doc.id, ordinal),
                doc_id: doc.id.clone(),
                title: doc.title.clone(),
                text: text.to_string(),
                ordinal,
                token_range: (start, end),
            });
            ordinal += 1;
            if end == n {
                break;
            }
            start += step;
        }
    }
    Ok(chunks)
}

fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}
