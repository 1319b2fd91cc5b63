//! Reference entity-graph backend.
//!
//! Chunks are turned into `(subject, relation, object)` triples by an
//! [`Extractor`]; entities become nodes keyed by their normalized name.
//! Retrieval seeds on nodes whose names match the query, expands `hops`
//! steps over the undirected view of the graph, and ranks the reached edges
//! by
//!
//! ```text
//! score(e) = |{src, dst} ∩ seeds| + 1 / hop(e)
//! ```
//!
//! where `hop(e)` is the expansion step at which the edge was first reached
//! (1 for edges touching a seed). Source chunks of the returned edges are
//! attached as supporting passages.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{
    Chunk, EvidenceKind, EvidenceUnit, KnowledgeBackend, KnowledgeError, Passage, RetrievalError,
    RetrievalResult,
};
use crate::cost::{count_tokens, CostReport};
use crate::llm::{CompletionRequest, LanguageModel, Message};
use crate::text::{is_stopword, lexical_tokens};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triple {
    pub fn new(s: &str, r: &str, o: &str) -> Self {
        Self {
            subject: s.into(),
            relation: r.into(),
            object: o.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Normalized name.
    pub id: String,
    /// First surface form seen.
    pub name: String,
    pub mention_chunk_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: String,
    pub src: String,
    pub dst: String,
    pub relation: String,
    pub source_chunk_id: String,
}

/// Directed multigraph: parallel edges allowed, self-loops never stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl EntityGraph {
    fn node_index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect()
    }

    /// Adds a triple, returning false when it is dropped (empty entity or
    /// self-loop).
    pub fn add_triple(&mut self, triple: &Triple, chunk_id: &str) -> bool {
        let mut lookup = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
        self.insert_triple(triple, chunk_id, &mut lookup)
    }

    fn insert_triple(
        &mut self,
        triple: &Triple,
        chunk_id: &str,
        lookup: &mut HashMap<String, usize>,
    ) -> bool {
        let src = normalize_entity(&triple.subject);
        let dst = normalize_entity(&triple.object);
        let relation = triple.relation.trim();
        if src.is_empty() || dst.is_empty() || relation.is_empty() || src == dst {
            return false;
        }
        for (id, surface) in [(&src, &triple.subject), (&dst, &triple.object)] {
            match lookup.get(id) {
                Some(&i) => {
                    let node = &mut self.nodes[i];
                    if !node.mention_chunk_ids.iter().any(|c| c == chunk_id) {
                        node.mention_chunk_ids.push(chunk_id.to_string());
                    }
                }
                None => {
                    lookup.insert(id.clone(), self.nodes.len());
                    self.nodes.push(Node {
                        id: id.clone(),
                        name: surface.trim().to_string(),
                        mention_chunk_ids: vec![chunk_id.to_string()],
                    });
                }
            }
        }
        let id = format!("edge:{:06}", self.edges.len());
        self.edges.push(Edge {
            id,
            src,
            dst,
            relation: relation.to_string(),
            source_chunk_id: chunk_id.to_string(),
        });
        true
    }

    /// Checks the structural invariants: endpoints exist, no self-loops,
    /// every node mentioned at least once.
    pub fn validate(&self) -> Result<(), String> {
        let idx = self.node_index();
        for e in &self.edges {
            if !idx.contains_key(e.src.as_str()) || !idx.contains_key(e.dst.as_str()) {
                return Err(format!("edge {} has a dangling endpoint", e.id));
            }
            if e.src == e.dst {
                return Err(format!("edge {} is a self-loop", e.id));
            }
        }
        if let Some(n) = self.nodes.iter().find(|n| n.mention_chunk_ids.is_empty()) {
            return Err(format!("node {} has no mention", n.id));
        }
        Ok(())
    }
}

fn normalize_entity(name: &str) -> String {
    lexical_tokens(name).join(" ")
}

/// Surface-pattern triple extractor. Each sentence is searched for the
/// earliest pattern phrase (case-insensitive, on word boundaries); the text
/// before it is the subject and the text after it the object.
#[derive(Debug, Clone)]
pub struct RuleExtractor {
    patterns: Vec<(String, String)>,
}

impl Default for RuleExtractor {
    fn default() -> Self {
        Self::new(&[
            ("was born in", "born in"),
            ("is the capital of", "capital of"),
            ("is capital of", "capital of"),
            ("is located in", "located in"),
            ("died in", "died in"),
            ("is part of", "part of"),
            ("was founded by", "founded by"),
            ("was directed by", "directed by"),
            ("was written by", "written by"),
            ("is married to", "married to"),
            ("works for", "works for"),
            ("is a member of", "member of"),
        ])
    }
}

impl RuleExtractor {
    pub fn new(patterns: &[(&str, &str)]) -> Self {
        let mut patterns: Vec<(String, String)> = patterns
            .iter()
            .map(|(p, r)| (p.to_ascii_lowercase(), r.to_string()))
            .collect();
        // longer phrases win when two start at the same offset
        patterns.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        Self { patterns }
    }

    pub fn extract(&self, text: &str) -> Vec<Triple> {
        text.split(['.', '!', '?', ';', '\n'])
            .filter_map(|sentence| self.extract_sentence(sentence))
            .collect()
    }

    fn extract_sentence(&self, sentence: &str) -> Option<Triple> {
        let lower = sentence.to_ascii_lowercase();
        let (pos, phrase, relation) = self
            .patterns
            .iter()
            .filter_map(|(p, r)| find_word(&lower, p).map(|pos| (pos, p, r)))
            .min_by_key(|(pos, p, _)| (*pos, std::cmp::Reverse(p.len())))?;
        let subject = trim_entity(&sentence[..pos]);
        let object = trim_entity(&sentence[pos + phrase.len()..]);
        if subject.is_empty() || object.is_empty() {
            return None;
        }
        Some(Triple::new(subject, relation, object))
    }
}

fn trim_entity(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_whitespace() || c == ',' || c == ':' || c == '"')
}

fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    let bytes = haystack.as_bytes();
    let mut from = 0;
    while let Some(off) = haystack[from..].find(needle) {
        let start = from + off;
        let end = start + needle.len();
        let left_ok = start == 0 || !bytes[start - 1].is_ascii_alphanumeric();
        let right_ok = end == bytes.len() || !bytes[end].is_ascii_alphanumeric();
        if left_ok && right_ok {
            return Some(start);
        }
        from = start + 1;
        while !haystack.is_char_boundary(from) {
            from += 1;
        }
    }
    None
}

/// Prompt sent once per chunk by [`LlmExtractor`]; `{text}` is replaced by
/// the chunk text.
pub const EXTRACTION_PROMPT: &str = "Extract the factual relations stated in the passage below as (entity, relation, entity) triples.\n\
Return only a JSON array where every element is an array of three strings: [subject, relation, object].\n\
Use the entity names exactly as written in the passage. Return [] when the passage states no relation.\n\n\
Passage:\n{text}";

/// Triple extractor backed by a language model.
pub struct LlmExtractor {
    pub model: Arc<dyn LanguageModel>,
    pub model_name: String,
    pub max_tokens: u32,
}

impl LlmExtractor {
    pub fn new(model: Arc<dyn LanguageModel>, model_name: impl Into<String>) -> Self {
        Self {
            model,
            model_name: model_name.into(),
            max_tokens: 512,
        }
    }
}

pub enum Extractor {
    Rule(RuleExtractor),
    Llm(LlmExtractor),
}

/// Parses a JSON array of `[s, r, o]` string triples, tolerating prose
/// around the array.
pub(crate) fn parse_triples(reply: &str) -> Option<Vec<Triple>> {
    let start = reply.find('[')?;
    let end = reply.rfind(']')?;
    if end < start {
        return None;
    }
    let rows: Vec<Vec<String>> = serde_json::from_str(&reply[start..=end]).ok()?;
    rows.into_iter()
        .map(|row| match row.as_slice() {
            [s, r, o] => Some(Triple::new(s, r, o)),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Expansion depth; 1 returns only edges touching a seed node.
    pub hops: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { hops: 1 }
    }
}

pub struct EntityGraphBackend {
    name: String,
    pub(crate) chunks: Vec<Chunk>,
    chunk_index: HashMap<String, usize>,
    pub(crate) graph: EntityGraph,
    node_tokens: Vec<Vec<String>>,
    node_lookup: HashMap<String, usize>,
    adjacency: Vec<Vec<usize>>,
    pub(crate) config: GraphConfig,
    pub(crate) cost: CostReport,
    pub(crate) skipped_chunks: usize,
}

impl EntityGraphBackend {
    pub(crate) fn from_parts(
        chunks: Vec<Chunk>,
        graph: EntityGraph,
        config: GraphConfig,
        cost: CostReport,
        skipped_chunks: usize,
    ) -> Self {
        let chunk_index = chunks
            .iter()
            .enumerate()
            .map(|(i, c)| (c.chunk_id.clone(), i))
            .collect();
        let node_tokens = graph.nodes.iter().map(|n| lexical_tokens(&n.name)).collect();
        let node_lookup: HashMap<String, usize> = graph
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
        let mut adjacency = vec![Vec::new(); graph.nodes.len()];
        for (ei, e) in graph.edges.iter().enumerate() {
            adjacency[node_lookup[&e.src]].push(ei);
            adjacency[node_lookup[&e.dst]].push(ei);
        }
        Self {
            name: "entity-graph".into(),
            chunks,
            chunk_index,
            graph,
            node_tokens,
            node_lookup,
            adjacency,
            config,
            cost,
            skipped_chunks,
        }
    }

    pub fn graph(&self) -> &EntityGraph {
        &self.graph
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    /// Chunks whose extraction output could not be parsed.
    pub fn skipped_chunks(&self) -> usize {
        self.skipped_chunks
    }

    pub fn hops(&self) -> usize {
        self.config.hops
    }

    /// Nodes whose name occurs in the query as a contiguous token run, or
    /// share a non-stopword token of 3+ characters with it.
    pub fn seed_nodes(&self, query: &str) -> BTreeSet<usize> {
        let q = lexical_tokens(query);
        self.node_tokens
            .iter()
            .enumerate()
            .filter(|(_, name)| {
                let contained = !name.is_empty() && q.windows(name.len()).any(|w| w == name.as_slice());
                let shared = q
                    .iter()
                    .filter(|t| t.chars().count() >= 3 && !is_stopword(t))
                    .any(|t| name.contains(t));
                contained || shared
            })
            .map(|(i, _)| i)
            .collect()
    }

    fn node_pos(&self, id: &str) -> usize {
        self.node_lookup[id]
    }
}

impl KnowledgeBackend for EntityGraphBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn search(&self, query: &str, top_k: usize) -> Result<RetrievalResult, RetrievalError> {
        let seeds = self.seed_nodes(query);
        let mut result = RetrievalResult::empty(query, &self.name);
        if seeds.is_empty() {
            return Ok(result);
        }
        let mut edge_hop: HashMap<usize, usize> = HashMap::new();
        let mut visited: BTreeSet<usize> = seeds.clone();
        let mut frontier: Vec<usize> = seeds.iter().copied().collect();
        for hop in 1..=self.config.hops.max(1) {
            let mut next = Vec::new();
            for &node in &frontier {
                for &ei in &self.adjacency[node] {
                    edge_hop.entry(ei).or_insert(hop);
                    let e = &self.graph.edges[ei];
                    for end in [&e.src, &e.dst] {
                        let pos = self.node_pos(end);
                        if visited.insert(pos) {
                            next.push(pos);
                        }
                    }
                }
            }
            next.sort_unstable();
            frontier = next;
        }
        let mut units: Vec<EvidenceUnit> = edge_hop
            .iter()
            .map(|(&ei, &hop)| {
                let e = &self.graph.edges[ei];
                let seed_ends = [&e.src, &e.dst]
                    .iter()
                    .filter(|end| seeds.contains(&self.node_pos(end)))
                    .count();
                let chunk = &self.chunks[self.chunk_index[&e.source_chunk_id]];
                let src_name = &self.graph.nodes[self.node_pos(&e.src)].name;
                let dst_name = &self.graph.nodes[self.node_pos(&e.dst)].name;
                EvidenceUnit {
                    id: e.id.clone(),
                    doc_id: chunk.doc_id.clone(),
                    title: chunk.title.clone(),
                    text: format!("({}, {}, {})", src_name, e.relation, dst_name),
                    score: seed_ends as f64 + 1.0 / hop as f64,
                    kind: EvidenceKind::GraphEdge,
                    source_chunk_id: Some(e.source_chunk_id.clone()),
                }
            })
            .collect();
        super::sort_units(&mut units);
        units.truncate(top_k);
        let mut seen = BTreeSet::new();
        for u in &units {
            let cid = u.source_chunk_id.as_ref().expect("graph edges carry a source");
            if seen.insert(cid.clone()) {
                let c = &self.chunks[self.chunk_index[cid]];
                result.passages.push(Passage {
                    chunk_id: c.chunk_id.clone(),
                    title: c.title.clone(),
                    text: c.text.clone(),
                });
            }
        }
        result.units = units;
        Ok(result)
    }

    fn build_cost(&self) -> CostReport {
        self.cost.clone()
    }
}

/// Extracts triples from every chunk and indexes the resulting graph.
///
/// Unparseable extractor output skips the chunk (counted, logged) and never
/// fails the build.
pub fn build_entity_graph_backend(
    chunks: Vec<Chunk>,
    extractor: &Extractor,
    config: GraphConfig,
) -> Result<EntityGraphBackend, KnowledgeError> {
    if chunks.is_empty() {
        return Err(KnowledgeError::NoChunks("entity-graph"));
    }
    let started = Instant::now();
    let mut graph = EntityGraph::default();
    let mut lookup = HashMap::new();
    let mut cost = CostReport::default();
    let mut skipped = 0;
    for chunk in &chunks {
        let triples = match extractor {
            Extractor::Rule(rules) => Some(rules.extract(&chunk.text)),
            Extractor::Llm(llm) => {
                let prompt = EXTRACTION_PROMPT.replace("{text}", &chunk.text);
                let request = CompletionRequest {
                    max_tokens: llm.max_tokens,
                    ..CompletionRequest::new(&llm.model_name, vec![Message::user(prompt)])
                };
                cost.llm_calls += 1;
                match llm.model.complete(&request) {
                    Ok(c) => {
                        cost.llm_tokens_in += c.prompt_tokens;
                        cost.llm_tokens_out += c.completion_tokens;
                        parse_triples(&c.text)
                    }
                    Err(e) => {
                        warn!("extraction call failed for {}: {e}", chunk.chunk_id);
                        None
                    }
                }
            }
        };
        match triples {
            Some(ts) => {
                for t in &ts {
                    graph.insert_triple(t, &chunk.chunk_id, &mut lookup);
                }
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("entity graph build skipped {skipped} chunk(s) with unparseable triples");
    }
    let tokens = chunks.iter().map(|c| count_tokens(&c.text)).sum();
    let cost = cost.with_construction(started.elapsed().as_secs_f64(), tokens);
    Ok(EntityGraphBackend::from_parts(chunks, graph, config, cost, skipped))
}
