//! Exact (non-approximate) dense retrieval over chunks.
//!
//! Lexical mode scores with TF-IDF cosine similarity:
//!
//! ```text
//! idf(t)   = ln((1 + N) / (1 + df(t))) + 1
//! w(t, x)  = tf(t, x) * idf(t)
//! score    = sum_t w(t, q) * w(t, d) / (|w(., q)| * |w(., d)|)
//! ```
//!
//! where `N` is the chunk count, `df` the number of chunks containing the
//! term, and tokens come from [`crate::text::lexical_tokens`]. Query terms
//! absent from the index are ignored; a query with no known term scores
//! every chunk 0. Embedding mode scores by the inner product of
//! unit-normalized vectors.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use super::{Chunk, EvidenceKind, EvidenceUnit, KnowledgeBackend, KnowledgeError, RetrievalError, RetrievalResult};
use crate::cost::{count_tokens, CostReport};
use crate::text::lexical_tokens;

/// Text embedding service used by embedding mode.
pub trait EmbeddingClient: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, String>;
}

#[derive(Clone)]
pub enum DenseScorer {
    Lexical,
    Embedding(Arc<dyn EmbeddingClient>),
}

/// Inverted TF-IDF index with unit-normalized chunk vectors.
#[derive(Debug, Clone)]
pub struct TfIdfIndex {
    vocab: HashMap<String, usize>,
    idf: Vec<f64>,
    /// term id -> (chunk index, normalized weight)
    postings: Vec<Vec<(usize, f64)>>,
}

impl TfIdfIndex {
    pub fn build(texts: &[&str]) -> Self {
        let mut vocab: HashMap<String, usize> = HashMap::new();
        let mut df: Vec<usize> = Vec::new();
        let mut doc_tfs: Vec<BTreeMap<usize, f64>> = Vec::with_capacity(texts.len());
        for text in texts {
            let mut tf: BTreeMap<usize, f64> = BTreeMap::new();
            for tok in lexical_tokens(text) {
                let next = vocab.len();
                let id = *vocab.entry(tok).or_insert(next);
                if id == df.len() {
                    df.push(0);
                }
                *tf.entry(id).or_insert(0.0) += 1.0;
            }
            for id in tf.keys() {
                df[*id] += 1;
            }
            doc_tfs.push(tf);
        }
        let n = texts.len() as f64;
        let idf: Vec<f64> = df
            .iter()
            .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        let mut postings = vec![Vec::new(); idf.len()];
        for (doc, tf) in doc_tfs.iter().enumerate() {
            let norm = tf
                .iter()
                .map(|(id, c)| (c * idf[*id]).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                continue;
            }
            for (id, c) in tf {
                postings[*id].push((doc, c * idf[*id] / norm));
            }
        }
        Self {
            vocab,
            idf,
            postings,
        }
    }

    /// Cosine score of every indexed chunk against `query`, in chunk order.
    pub fn score_all(&self, query: &str, n_chunks: usize) -> Vec<f64> {
        let mut qtf: BTreeMap<usize, f64> = BTreeMap::new();
        for tok in lexical_tokens(query) {
            if let Some(&id) = self.vocab.get(&tok) {
                *qtf.entry(id).or_insert(0.0) += 1.0;
            }
        }
        let mut scores = vec![0.0; n_chunks];
        let qnorm = qtf
            .iter()
            .map(|(id, c)| (c * self.idf[*id]).powi(2))
            .sum::<f64>()
            .sqrt();
        if qnorm == 0.0 {
            return scores;
        }
        for (id, c) in &qtf {
            let qw = c * self.idf[*id] / qnorm;
            for &(doc, dw) in &self.postings[*id] {
                scores[doc] += qw * dw;
            }
        }
        scores
    }
}

enum DenseIndex {
    Lexical(TfIdfIndex),
    Embedding {
        vectors: Vec<Vec<f32>>,
        client: Arc<dyn EmbeddingClient>,
    },
}

pub struct DenseBackend {
    name: String,
    pub(crate) chunks: Vec<Chunk>,
    index: DenseIndex,
    pub(crate) cost: CostReport,
}

impl DenseBackend {
    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn is_lexical(&self) -> bool {
        matches!(self.index, DenseIndex::Lexical(_))
    }

    pub(crate) fn embedding_vectors(&self) -> Option<&[Vec<f32>]> {
        match &self.index {
            DenseIndex::Embedding { vectors, .. } => Some(vectors),
            DenseIndex::Lexical(_) => None,
        }
    }

    pub(crate) fn from_parts_embedding(
        chunks: Vec<Chunk>,
        vectors: Vec<Vec<f32>>,
        client: Arc<dyn EmbeddingClient>,
        cost: CostReport,
    ) -> Self {
        Self {
            name: "dense-embedding".into(),
            chunks,
            index: DenseIndex::Embedding { vectors, client },
            cost,
        }
    }

    pub(crate) fn from_parts_lexical(chunks: Vec<Chunk>, cost: CostReport) -> Self {
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let index = TfIdfIndex::build(&texts);
        Self {
            name: "dense-lexical".into(),
            chunks,
            index: DenseIndex::Lexical(index),
            cost,
        }
    }

    fn scores(&self, query: &str) -> Result<Vec<f64>, RetrievalError> {
        match &self.index {
            DenseIndex::Lexical(idx) => Ok(idx.score_all(query, self.chunks.len())),
            DenseIndex::Embedding { vectors, client } => {
                let q = client
                    .embed(&[query.to_string()])
                    .map_err(|e| RetrievalError::new(&self.name, e))?;
                let q = q
                    .into_iter()
                    .next()
                    .ok_or_else(|| RetrievalError::new(&self.name, "empty embedding response"))?;
                let q = unit_normalize(q);
                Ok(vectors
                    .iter()
                    .map(|v| v.iter().zip(&q).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum())
                    .collect())
            }
        }
    }
}

pub(crate) fn unit_normalize(mut v: Vec<f32>) -> Vec<f32> {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
    v
}

impl KnowledgeBackend for DenseBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn search(&self, query: &str, top_k: usize) -> Result<RetrievalResult, RetrievalError> {
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..self.chunks.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.chunks[a].chunk_id.cmp(&self.chunks[b].chunk_id))
        });
        let units = order
            .into_iter()
            .take(top_k)
            .map(|i| {
                let c = &self.chunks[i];
                EvidenceUnit {
                    id: c.chunk_id.clone(),
                    doc_id: c.doc_id.clone(),
                    title: c.title.clone(),
                    text: c.text.clone(),
                    score: scores[i],
                    kind: EvidenceKind::Chunk,
                    source_chunk_id: None,
                }
            })
            .collect();
        let mut result = RetrievalResult::empty(query, &self.name);
        result.units = units;
        Ok(result)
    }

    fn build_cost(&self) -> CostReport {
        self.cost.clone()
    }
}

/// Builds an exact dense index over `chunks`.
pub fn build_dense_backend(
    chunks: Vec<Chunk>,
    scorer: DenseScorer,
) -> Result<DenseBackend, KnowledgeError> {
    if chunks.is_empty() {
        return Err(KnowledgeError::NoChunks("dense"));
    }
    let started = Instant::now();
    let tokens: u64 = chunks.iter().map(|c| count_tokens(&c.text)).sum();
    let backend = match scorer {
        DenseScorer::Lexical => DenseBackend::from_parts_lexical(chunks, CostReport::default()),
        DenseScorer::Embedding(client) => {
            let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
            let vectors = client.embed(&texts).map_err(KnowledgeError::Embedding)?;
            if vectors.len() != chunks.len() {
                return Err(KnowledgeError::Embedding(format!(
                    "expected {} vectors, got {}",
                    chunks.len(),
                    vectors.len()
                )));
            }
            let vectors = vectors.into_iter().map(unit_normalize).collect();
            DenseBackend::from_parts_embedding(chunks, vectors, client, CostReport::default())
        }
    };
    let cost = CostReport::default().with_construction(started.elapsed().as_secs_f64(), tokens);
    Ok(DenseBackend { cost, ..backend })
}
