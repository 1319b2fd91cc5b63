//! Operator commands behind the `agentic-search` binary: build a backend
//! offline, run evaluations, collect rollout groups and merge reports.
//!
//! Every command takes a [`RunConfig`] (one TOML file plus flag overrides)
//! and returns a summary; the binary only parses flags, prints and maps
//! [`CliError`] to an exit code.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{run_pipeline, AgentSettings, DecompositionMode, EpisodeBudget, EpisodeContext, Pipeline, Trajectory};
use crate::cost::CostReport;
use crate::eval::{aggregate, format_mean_std, MetricsReport, QuestionRow, RunOutput, REPORT_SCHEMA_VERSION};
use crate::grpo::{collect_group, export_batch, GroupSpec};
use crate::knowledge::{
    build_dense_backend, build_entity_graph_backend, chunk_corpus, ingest_corpus_file, load_backend,
    remote_backend, save_backend, ChunkPolicy, DenseScorer, EmbeddingClient, Extractor, GraphConfig,
    KnowledgeBackend, LlmExtractor, LocalBackend, RemoteConfig, RuleExtractor,
};
use crate::llm::{LanguageModel, OpenAiClient, OpenAiConfig, OpenAiEmbeddingClient, ScriptedModel};
use crate::text::fnv1a64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Which retrieval infrastructure a run uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    DenseLexical,
    DenseEmbedding,
    EntityGraph,
    Remote(String),
}

impl BackendSpec {
    /// Label used in reports.
    pub fn label(&self) -> &str {
        match self {
            BackendSpec::DenseLexical => "dense-lexical",
            BackendSpec::DenseEmbedding => "dense-embedding",
            BackendSpec::EntityGraph => "entity-graph",
            BackendSpec::Remote(_) => "remote",
        }
    }
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dense-lexical" => Ok(BackendSpec::DenseLexical),
            "dense-embedding" => Ok(BackendSpec::DenseEmbedding),
            "entity-graph" => Ok(BackendSpec::EntityGraph),
            _ => match s.strip_prefix("remote:") {
                Some(url) if !url.is_empty() => Ok(BackendSpec::Remote(url.to_string())),
                _ => Err(format!(
                    "unknown backend {s:?}; expected dense-lexical, dense-embedding, entity-graph or remote:<url>"
                )),
            },
        }
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(b: BackendSpec) -> String {
        match b {
            BackendSpec::Remote(url) => format!("remote:{url}"),
            other => other.label().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    /// Record measured wall-clock times.
    #[default]
    Wall,
    /// Zero every measured duration so reports are byte-reproducible.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayKind {
    #[default]
    Openai,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub kind: GatewayKind,
    /// Scenario file for the scripted gateway.
    pub scenario: Option<PathBuf>,
    pub openai: OpenAiConfig,
    /// Model served by `/v1/embeddings` for dense-embedding backends.
    pub embedding_model: String,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            kind: GatewayKind::Openai,
            scenario: None,
            openai: OpenAiConfig::default(),
            embedding_model: "bge-base-en-v1.5".into(),
        }
    }
}

/// Decoding and prompt options passed to every episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentOptions {
    pub temperature: f64,
    pub max_tokens: u32,
    pub cot_hint: bool,
    pub decomposition: DecompositionMode,
    pub unit_char_budget: usize,
}

impl Default for AgentOptions {
    fn default() -> Self {
        let s = AgentSettings::default();
        Self {
            temperature: s.temperature,
            max_tokens: s.max_tokens,
            cot_hint: s.cot_hint,
            decomposition: s.decomposition,
            unit_char_budget: s.unit_char_budget,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    #[default]
    Rule,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphOptions {
    pub hops: usize,
    pub extractor: ExtractorKind,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            hops: GraphConfig::default().hops,
            extractor: ExtractorKind::Rule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    /// Report label; defaults to the dataset file stem.
    pub dataset_name: Option<String>,
    pub corpus: Option<PathBuf>,
    /// Persisted backend. `build` writes it; `run` loads it when present and
    /// otherwise builds from `corpus` in memory.
    pub index: Option<PathBuf>,
    pub pipeline: Pipeline,
    pub backend: BackendSpec,
    pub top_k: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub parallel: usize,
    pub timing: Timing,
    pub budget: EpisodeBudget,
    pub agent: AgentOptions,
    pub chunking: ChunkPolicy,
    pub graph: GraphOptions,
    pub gateway: GatewayConfig,
    pub collect: GroupSpec,
    /// Directory relative paths were resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            dataset_name: None,
            corpus: None,
            index: None,
            pipeline: Pipeline::RlAngle,
            backend: BackendSpec::DenseLexical,
            top_k: crate::knowledge::DEFAULT_TOP_K,
            seeds: vec![0],
            output_dir: PathBuf::from("out"),
            parallel: 4,
            timing: Timing::Wall,
            budget: EpisodeBudget::default(),
            agent: AgentOptions::default(),
            chunking: ChunkPolicy::default(),
            graph: GraphOptions::default(),
            gateway: GatewayConfig::default(),
            collect: GroupSpec::default(),
            base_dir: PathBuf::new(),
        }
    }
}

/// Command-line values that replace config file entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub pipeline: Option<Pipeline>,
    pub backend: Option<BackendSpec>,
    pub seeds: Option<Vec<u64>>,
    pub parallel: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub top_k: Option<usize>,
    pub index: Option<PathBuf>,
    pub group_size: Option<usize>,
    pub outcome_weight: Option<f64>,
}

impl RunConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        self.base_dir = base.to_path_buf();
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.dataset, &mut self.corpus, &mut self.index, &mut self.gateway.scenario]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.pipeline {
            self.pipeline = v;
        }
        if let Some(v) = &o.backend {
            self.backend = v.clone();
        }
        if let Some(v) = &o.seeds {
            self.seeds = v.clone();
        }
        if let Some(v) = o.parallel {
            self.parallel = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.top_k {
            self.top_k = v;
        }
        if let Some(v) = &o.index {
            self.index = Some(v.clone());
        }
        if let Some(v) = o.group_size {
            self.collect.group_size = v;
        }
        if let Some(v) = o.outcome_weight {
            self.collect.reward.outcome_weight = v;
        }
    }

    /// SHA-256 over the canonical JSON form of everything that can change an
    /// episode's outcome. Seeds, parallelism and the output location are left
    /// out: seeds are part of the cache key on their own.
    /// Paths are hashed relative to the config file so a checkout can move.
    pub fn config_hash(&self) -> String {
        let mut portable = self.clone();
        let rel = |p: &mut PathBuf| {
            if let Ok(stripped) = p.strip_prefix(&self.base_dir) {
                *p = stripped.to_path_buf();
            }
        };
        for p in [
            &mut portable.dataset,
            &mut portable.corpus,
            &mut portable.index,
            &mut portable.gateway.scenario,
        ]
        .into_iter()
        .flatten()
        {
            rel(p);
        }
        let mut value = serde_json::to_value(&portable).expect("config serializes");
        if let Value::Object(map) = &mut value {
            for key in ["seeds", "parallel", "output_dir"] {
                map.remove(key);
            }
        }
        let digest = Sha256::digest(canonical_json(&value).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn index_path(&self) -> PathBuf {
        self.index.clone().unwrap_or_else(|| self.output_dir.join("index.json"))
    }

    fn dataset_label(&self) -> String {
        self.dataset_name.clone().unwrap_or_else(|| {
            self.dataset
                .as_deref()
                .and_then(Path::file_stem)
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }

    fn settings(&self) -> AgentSettings {
        let model = match self.gateway.kind {
            GatewayKind::Openai => self.gateway.openai.model.clone(),
            GatewayKind::Scripted => "scripted".into(),
        };
        AgentSettings {
            model,
            top_k: self.top_k,
            budget: self.budget,
            temperature: self.agent.temperature,
            max_tokens: self.agent.max_tokens,
            seed: None,
            cot_hint: self.agent.cot_hint,
            decomposition: self.agent.decomposition,
            unit_char_budget: self.agent.unit_char_budget,
        }
    }

    fn check_common(&self) -> Result<(), CliError> {
        self.budget.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.top_k == 0 {
            return Err(CliError::Config("top_k must be at least 1".into()));
        }
        if self.parallel == 0 {
            return Err(CliError::Config("parallel must be at least 1".into()));
        }
        if self.gateway.kind == GatewayKind::Scripted {
            require_file(self.gateway.scenario.as_deref(), "gateway.scenario")?;
        }
        Ok(())
    }

    fn check_dataset(&self) -> Result<(), CliError> {
        require_file(self.dataset.as_deref(), "dataset")?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    /// A local backend needs either an existing index or a corpus.
    fn check_backend_source(&self) -> Result<(), CliError> {
        if matches!(self.backend, BackendSpec::Remote(_)) || self.index_path().is_file() {
            return Ok(());
        }
        require_file(self.corpus.as_deref(), "corpus")
    }
}

fn require_file(path: Option<&Path>, what: &str) -> Result<(), CliError> {
    match path {
        None => Err(CliError::Config(format!("{what} path is not set"))),
        Some(p) if !p.is_file() => Err(CliError::Config(format!("{what} not found: {}", p.display()))),
        Some(_) => Ok(()),
    }
}

/// JSON with object keys sorted at every level and no insignificant
/// whitespace.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            out.push('{');
            for (i, (k, v)) in sorted.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(v, out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(v, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// One evaluation question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    pub question: String,
    pub golden_answers: Vec<String>,
    /// Documents that support the answer; enables retrieval recall.
    #[serde(default)]
    pub gold_doc_ids: Vec<String>,
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetItem>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Config(format!("cannot open dataset {}: {e}", path.display())))?;
    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        let item: DatasetItem = serde_json::from_str(&line)
            .map_err(|e| runtime(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if !seen.insert(item.id.clone()) {
            return Err(runtime(format!("{}: duplicate question id {:?}", path.display(), item.id)));
        }
        items.push(item);
    }
    Ok(items)
}

/// Replies for the offline gateway. Each question gets a fresh model that
/// replays its own list (or `default`) from the first call.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub default: Vec<String>,
    pub questions: BTreeMap<String, Vec<String>>,
    /// Replies for LLM triple extraction during `build`.
    pub extraction: Vec<String>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("scenario {}: {e}", path.display())))
    }

    fn replies_for(&self, qid: &str) -> &[String] {
        self.questions.get(qid).map_or(&self.default, Vec::as_slice)
    }
}

enum Gateway {
    OpenAi(Arc<OpenAiClient>),
    Scripted(Scenario),
}

impl Gateway {
    fn open(cfg: &RunConfig) -> Result<Self, CliError> {
        match cfg.gateway.kind {
            GatewayKind::Openai => Ok(Gateway::OpenAi(Arc::new(OpenAiClient::new(cfg.gateway.openai.clone())))),
            GatewayKind::Scripted => {
                let path = cfg.gateway.scenario.as_deref().expect("checked scenario path");
                Ok(Gateway::Scripted(Scenario::load(path)?))
            }
        }
    }

    /// Fails fast when the model server cannot be reached.
    fn health_check(&self) -> Result<(), CliError> {
        match self {
            Gateway::OpenAi(client) => client
                .health_check()
                .map_err(|e| runtime(format!("model gateway health check failed: {e}"))),
            Gateway::Scripted(_) => Ok(()),
        }
    }

    fn model_for(&self, qid: &str) -> Result<Arc<dyn LanguageModel>, CliError> {
        match self {
            Gateway::OpenAi(client) => Ok(client.clone()),
            Gateway::Scripted(s) => ScriptedModel::from_replies(s.replies_for(qid).iter().cloned())
                .map(|m| Arc::new(m) as Arc<dyn LanguageModel>)
                .map_err(|e| runtime(format!("question {qid}: {e}"))),
        }
    }

    fn extraction_model(&self) -> Result<Arc<dyn LanguageModel>, CliError> {
        match self {
            Gateway::OpenAi(client) => Ok(client.clone()),
            Gateway::Scripted(s) => ScriptedModel::from_replies(s.extraction.iter().cloned())
                .map(|m| Arc::new(m) as Arc<dyn LanguageModel>)
                .map_err(|e| CliError::Config(format!("scenario extraction replies: {e}"))),
        }
    }
}

fn embedder(cfg: &RunConfig) -> Result<Arc<dyn EmbeddingClient>, CliError> {
    if cfg.gateway.kind != GatewayKind::Openai {
        return Err(CliError::Config("dense-embedding needs the openai gateway".into()));
    }
    Ok(Arc::new(OpenAiEmbeddingClient::new(OpenAiConfig {
        model: cfg.gateway.embedding_model.clone(),
        ..cfg.gateway.openai.clone()
    })))
}

fn build_local(cfg: &RunConfig, gateway: &Gateway) -> Result<LocalBackend, CliError> {
    let corpus_path = cfg.corpus.as_deref().expect("checked corpus path");
    let corpus = ingest_corpus_file(corpus_path).map_err(|e| runtime(format!("{}: {e}", corpus_path.display())))?;
    let chunks = chunk_corpus(&corpus, cfg.chunking).map_err(|e| CliError::Config(e.to_string()))?;
    let backend: LocalBackend = match &cfg.backend {
        BackendSpec::DenseLexical => build_dense_backend(chunks, DenseScorer::Lexical).map_err(runtime)?.into(),
        BackendSpec::DenseEmbedding => build_dense_backend(chunks, DenseScorer::Embedding(embedder(cfg)?))
            .map_err(runtime)?
            .into(),
        BackendSpec::EntityGraph => {
            let extractor = match cfg.graph.extractor {
                ExtractorKind::Rule => Extractor::Rule(RuleExtractor::default()),
                ExtractorKind::Llm => Extractor::Llm(LlmExtractor::new(
                    gateway.extraction_model()?,
                    cfg.settings().model,
                )),
            };
            build_entity_graph_backend(chunks, &extractor, GraphConfig { hops: cfg.graph.hops })
                .map_err(runtime)?
                .into()
        }
        BackendSpec::Remote(_) => return Err(CliError::Config("remote backends are not built locally".into())),
    };
    Ok(backend)
}

fn zero_construction_time(cost: &mut CostReport) {
    cost.construction_seconds = 0.0;
    cost.construction_seconds_per_1m_tokens = 0.0;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildSummary {
    pub backend: String,
    pub index: PathBuf,
    pub chunks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edges: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped_chunks: Option<usize>,
    pub cost: CostReport,
}

/// Builds the configured backend from the corpus and persists it.
pub fn cmd_build(cfg: &RunConfig) -> Result<BuildSummary, CliError> {
    cfg.check_common()?;
    if matches!(cfg.backend, BackendSpec::Remote(_)) {
        return Err(CliError::Config("remote backends are not built locally".into()));
    }
    require_file(cfg.corpus.as_deref(), "corpus")?;
    let gateway = Gateway::open(cfg)?;
    if cfg.backend == BackendSpec::EntityGraph && cfg.graph.extractor == ExtractorKind::Llm {
        gateway.health_check()?;
    }
    let mut backend = build_local(cfg, &gateway)?;
    if cfg.timing == Timing::None {
        zero_construction_time(backend.cost_mut());
    }
    let index = cfg.index_path();
    if let Some(dir) = index.parent() {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    save_backend(&backend, &index).map_err(|e| runtime(format!("{}: {e}", index.display())))?;
    let file = backend.to_index_file();
    let graph = file.graph.as_ref();
    Ok(BuildSummary {
        backend: backend.name().to_string(),
        index,
        chunks: file.chunks.len(),
        nodes: graph.map(|g| g.nodes.len()),
        edges: graph.map(|g| g.edges.len()),
        skipped_chunks: graph.map(|_| file.skipped_chunks),
        cost: file.cost,
    })
}

fn open_backend(cfg: &RunConfig, gateway: &Gateway) -> Result<Box<dyn KnowledgeBackend>, CliError> {
    if let BackendSpec::Remote(url) = &cfg.backend {
        return Ok(Box::new(remote_backend(url, "remote", RemoteConfig::default())));
    }
    let index = cfg.index_path();
    let mut backend = if index.is_file() {
        let emb = match cfg.backend {
            BackendSpec::DenseEmbedding => Some(embedder(cfg)?),
            _ => None,
        };
        let loaded = load_backend(&index, emb).map_err(|e| runtime(format!("{}: {e}", index.display())))?;
        if loaded.name() != cfg.backend.label() {
            return Err(CliError::Config(format!(
                "index {} holds a {} backend but the config asks for {}",
                index.display(),
                loaded.name(),
                cfg.backend.label()
            )));
        }
        loaded
    } else {
        info!("no index at {}; building from corpus", index.display());
        build_local(cfg, gateway)?
    };
    if cfg.timing == Timing::None {
        zero_construction_time(backend.cost_mut());
    }
    Ok(Box::new(backend))
}

/// Stored result of one (question, seed) episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub qid: String,
    pub seed: u64,
    pub config_hash: String,
    pub row: QuestionRow,
    pub trajectory: Trajectory,
}

fn file_key(qid: &str) -> String {
    let safe: String = qid
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(48)
        .collect();
    format!("{safe}-{:016x}", fnv1a64(qid.as_bytes()))
}

pub fn cache_path(cfg: &RunConfig, hash: &str, seed: u64, qid: &str) -> PathBuf {
    cfg.output_dir
        .join("cache")
        .join(hash)
        .join(format!("seed-{seed}"))
        .join(format!("{}.json", file_key(qid)))
}

/// Write to a sibling temp file, then rename over the target.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| runtime(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn read_cache(path: &Path, hash: &str, seed: u64, qid: &str) -> Option<CacheEntry> {
    let text = fs::read_to_string(path).ok()?;
    match serde_json::from_str::<CacheEntry>(&text) {
        Ok(e) if e.qid == qid && e.seed == seed && e.config_hash == hash => Some(e),
        Ok(_) => None,
        Err(e) => {
            warn!("ignoring unreadable cache entry {}: {e}", path.display());
            None
        }
    }
}

fn strip_timing(traj: &mut Trajectory) {
    traj.cost.mean_retrieval_seconds = 0.0;
    for step in &mut traj.steps {
        if let Some(r) = &mut step.retrieval {
            r.elapsed_ms = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub report: MetricsReport,
    pub report_path: PathBuf,
    pub config_hash: String,
    pub episodes_run: usize,
    pub cache_hits: usize,
}

/// Evaluates every dataset question once per seed and writes per-run and
/// aggregate reports under `output_dir`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    cfg.check_common()?;
    cfg.check_dataset()?;
    cfg.check_backend_source()?;
    let gateway = Gateway::open(cfg)?;
    gateway.health_check()?;
    let items = load_dataset(cfg.dataset.as_deref().expect("checked dataset path"))?;
    if items.is_empty() {
        return Err(runtime("dataset has no questions"));
    }
    let backend = open_backend(cfg, &gateway)?;
    let hash = cfg.config_hash();
    let base_settings = cfg.settings();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel)
        .build()
        .map_err(runtime)?;
    let hits = AtomicUsize::new(0);
    let ran = AtomicUsize::new(0);

    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let settings = AgentSettings {
            seed: Some(seed),
            ..base_settings.clone()
        };
        let rows: Result<Vec<QuestionRow>, CliError> = pool.install(|| {
            items
                .par_iter()
                .map(|item| {
                    let path = cache_path(cfg, &hash, seed, &item.id);
                    if let Some(entry) = read_cache(&path, &hash, seed, &item.id) {
                        hits.fetch_add(1, Ordering::Relaxed);
                        return Ok(entry.row);
                    }
                    let model = gateway.model_for(&item.id)?;
                    let ctx = EpisodeContext {
                        backend: backend.as_ref(),
                        model: model.as_ref(),
                        settings: &settings,
                    };
                    let mut traj = run_pipeline(cfg.pipeline, &item.question, ctx)
                        .map_err(|e| runtime(format!("question {}: {e}", item.id)))?;
                    if cfg.timing == Timing::None {
                        strip_timing(&mut traj);
                    }
                    let gold_docs: BTreeSet<String> = item.gold_doc_ids.iter().cloned().collect();
                    let row = QuestionRow::score(&item.id, &traj, &item.golden_answers, &gold_docs);
                    let entry = CacheEntry {
                        qid: item.id.clone(),
                        seed,
                        config_hash: hash.clone(),
                        row: row.clone(),
                        trajectory: traj,
                    };
                    write_atomic(&path, &serde_json::to_string(&entry).map_err(runtime)?)?;
                    ran.fetch_add(1, Ordering::Relaxed);
                    Ok(row)
                })
                .collect()
        });
        runs.push(RunOutput { seed, rows: rows? });
    }

    let dataset = cfg.dataset_label();
    let pipeline = cfg.pipeline.as_str();
    let backend_label = cfg.backend.label();
    let build_cost = backend.build_cost();
    for run in &runs {
        let report = aggregate(&dataset, pipeline, backend_label, std::slice::from_ref(run), &build_cost).map_err(runtime)?;
        let path = cfg.output_dir.join("runs").join(format!("seed-{}.json", run.seed));
        write_atomic(&path, &report.to_json().map_err(runtime)?)?;
    }
    let report = aggregate(&dataset, pipeline, backend_label, &runs, &build_cost).map_err(runtime)?;
    let report_path = cfg.output_dir.join("report.json");
    write_atomic(&report_path, &report.to_json().map_err(runtime)?)?;
    write_atomic(&cfg.output_dir.join("report.csv"), &report.to_csv().map_err(runtime)?)?;
    Ok(RunSummary {
        report,
        report_path,
        config_hash: hash,
        episodes_run: ran.into_inner(),
        cache_hits: hits.into_inner(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollectedBatch {
    pub qid: String,
    pub path: PathBuf,
    pub records: usize,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Samples one rollout group per dataset question and exports each group
/// as a JSONL batch under `output_dir/batches`.
pub fn cmd_collect(cfg: &RunConfig) -> Result<Vec<CollectedBatch>, CliError> {
    cfg.check_common()?;
    cfg.check_dataset()?;
    if cfg.collect.group_size < 2 {
        return Err(CliError::Config(format!(
            "group_size {} is too small: advantages need at least 2 rollouts",
            cfg.collect.group_size
        )));
    }
    cfg.collect.reward.validate().map_err(|e| CliError::Config(e.to_string()))?;
    cfg.check_backend_source()?;
    let gateway = Gateway::open(cfg)?;
    gateway.health_check()?;
    let items = load_dataset(cfg.dataset.as_deref().expect("checked dataset path"))?;
    let backend = open_backend(cfg, &gateway)?;
    let settings = cfg.settings();
    let spec = GroupSpec {
        seed: cfg.seeds[0],
        ..cfg.collect
    };
    let dir = cfg.output_dir.join("batches");
    fs::create_dir_all(&dir).map_err(runtime)?;
    let mut out = Vec::with_capacity(items.len());
    for item in &items {
        let model = gateway.model_for(&item.id)?;
        let ctx = EpisodeContext {
            backend: backend.as_ref(),
            model: model.as_ref(),
            settings: &settings,
        };
        let mut batch = collect_group(&item.question, &item.golden_answers, cfg.pipeline, ctx, &spec)
            .map_err(|e| runtime(format!("question {}: {e}", item.id)))?;
        if cfg.timing == Timing::None {
            batch.trajectories.iter_mut().for_each(strip_timing);
        }
        let path = dir.join(format!("{}.jsonl", file_key(&item.id)));
        let records = export_batch(&batch, &path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        out.push(CollectedBatch {
            qid: item.id.clone(),
            path,
            records,
            rewards: batch.rewards,
            advantages: batch.advantages,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mark {
    Best,
    SecondBest,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub mean: f64,
    pub std: f64,
    pub mark: Option<Mark>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub pipeline: String,
    pub backend: String,
    pub cells: Vec<Option<GridCell>>,
}

/// Contain-EM grid: one row per pipeline and backend, one column per dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportGrid {
    pub datasets: Vec<String>,
    pub rows: Vec<GridRow>,
}

impl ReportGrid {
    pub fn from_reports(reports: &[MetricsReport]) -> Result<Self, CliError> {
        let datasets: Vec<String> = reports
            .iter()
            .map(|r| r.dataset.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut rows: Vec<GridRow> = Vec::new();
        let mut index: HashMap<(String, String), usize> = HashMap::new();
        for r in reports {
            let key = (r.pipeline.clone(), r.backend.clone());
            let i = *index.entry(key).or_insert_with(|| {
                rows.push(GridRow {
                    pipeline: r.pipeline.clone(),
                    backend: r.backend.clone(),
                    cells: vec![None; datasets.len()],
                });
                rows.len() - 1
            });
            let col = datasets.iter().position(|d| *d == r.dataset).expect("dataset column");
            if rows[i].cells[col].is_some() {
                return Err(runtime(format!(
                    "two reports for {} / {} on {}",
                    r.pipeline, r.backend, r.dataset
                )));
            }
            rows[i].cells[col] = Some(GridCell {
                mean: r.contain_em_mean,
                std: r.em_std_over_runs,
                mark: None,
            });
        }
        for col in 0..datasets.len() {
            let mut values: Vec<f64> = rows.iter().filter_map(|r| r.cells[col].as_ref().map(|c| c.mean)).collect();
            values.sort_by(|a, b| b.total_cmp(a));
            values.dedup();
            for row in &mut rows {
                if let Some(cell) = &mut row.cells[col] {
                    cell.mark = if Some(&cell.mean) == values.first() {
                        Some(Mark::Best)
                    } else if Some(&cell.mean) == values.get(1) {
                        Some(Mark::SecondBest)
                    } else {
                        None
                    };
                }
            }
        }
        Ok(Self { datasets, rows })
    }

    /// Markdown table; best cells in bold, second best underlined.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "| pipeline | backend |");
        for d in &self.datasets {
            let _ = write!(out, " {d} |");
        }
        out.push('\n');
        out.push_str("|---|---|");
        out.push_str(&"---|".repeat(self.datasets.len()));
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "| {} | {} |", row.pipeline, row.backend);
            for cell in &row.cells {
                let text = match cell {
                    None => "-".to_string(),
                    Some(c) => {
                        let v = format_mean_std(c.mean, c.std);
                        match c.mark {
                            Some(Mark::Best) => format!("**{v}**"),
                            Some(Mark::SecondBest) => format!("<u>{v}</u>"),
                            None => v,
                        }
                    }
                };
                let _ = write!(out, " {text} |");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["pipeline".to_string(), "backend".to_string()];
        header.extend(self.datasets.iter().cloned());
        w.write_record(&header).map_err(runtime)?;
        for row in &self.rows {
            let mut rec = vec![row.pipeline.clone(), row.backend.clone()];
            rec.extend(row.cells.iter().map(|c| match c {
                None => String::new(),
                Some(c) => {
                    let mark = match c.mark {
                        Some(Mark::Best) => " (best)",
                        Some(Mark::SecondBest) => " (second)",
                        None => "",
                    };
                    format!("{}{mark}", format_mean_std(c.mean, c.std))
                }
            }));
            w.write_record(&rec).map_err(runtime)?;
        }
        let bytes = w.into_inner().map_err(runtime)?;
        Ok(String::from_utf8(bytes).expect("utf-8 csv"))
    }
}

/// Reads report files, rejecting any whose schema version differs.
pub fn load_reports(paths: &[PathBuf]) -> Result<Vec<MetricsReport>, CliError> {
    if paths.is_empty() {
        return Err(CliError::Config("no report files given".into()));
    }
    let mut reports = Vec::new();
    let mut mismatched = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
        let version = value.get("schema_version").and_then(Value::as_u64);
        if version != Some(u64::from(REPORT_SCHEMA_VERSION)) {
            let shown = version.map_or("missing".to_string(), |v| v.to_string());
            mismatched.push(format!("{} (schema {shown})", p.display()));
            continue;
        }
        reports.push(serde_json::from_value(value).map_err(|e| runtime(format!("{}: {e}", p.display())))?);
    }
    if !mismatched.is_empty() {
        return Err(runtime(format!(
            "report schema mismatch, expected version {REPORT_SCHEMA_VERSION}: {}",
            mismatched.join(", ")
        )));
    }
    Ok(reports)
}

pub fn cmd_report(paths: &[PathBuf]) -> Result<ReportGrid, CliError> {
    ReportGrid::from_reports(&load_reports(paths)?)
}
