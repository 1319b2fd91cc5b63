#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::{json, Value};

use agentic_search::grpo::{surrogate, surrogate_gradient, GrpoConfig, PolicySurface, TokenMask, ToyPolicy};
use agentic_search::protocol::{detect_action_boundary, parse_segments, BoundaryKind, Dialect, Segment, SegmentKind};
use agentic_search::knowledge::{
    retrieve, Chunk, KnowledgeBackend, RetrievalError, RetrievalResult,
};

pub fn chunk(id: &str, title: &str, text: &str) -> Chunk {
    Chunk {
        chunk_id: id.into(),
        doc_id: id.into(),
        title: title.into(),
        text: text.into(),
        ordinal: 0,
        token_range: (0, text.split_whitespace().count()),
    }
}

/// Words drawn with a skew so that document frequencies vary.
pub fn random_text(rng: &mut impl Rng, vocab: usize, len: usize) -> String {
    (0..len)
        .map(|_| {
            let a = rng.random_range(0..vocab);
            let b = rng.random_range(0..vocab);
            format!("w{}", a.min(b))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn synthetic_chunks(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<Chunk> {
    (0..n)
        .map(|i| {
            let len = rng.random_range(5..30);
            chunk(&format!("c{i:05}"), &format!("T{i}"), &random_text(rng, vocab, len))
        })
        .collect()
}

fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Scores every chunk with plain TF-IDF cosine, computed from scratch with
/// dense maps and no index.
pub fn tfidf_scores(chunks: &[Chunk], query: &str) -> Vec<f64> {
    let n = chunks.len() as f64;
    let docs: Vec<Vec<String>> = chunks.iter().map(|c| words(&c.text)).collect();
    let mut df: HashMap<&str, f64> = HashMap::new();
    for d in &docs {
        let uniq: BTreeSet<&str> = d.iter().map(String::as_str).collect();
        for w in uniq {
            *df.entry(w).or_default() += 1.0;
        }
    }
    let idf = |w: &str| df.get(w).map(|d| ((1.0 + n) / (1.0 + d)).ln() + 1.0);
    let vector = |toks: &[String]| {
        let mut v: HashMap<String, f64> = HashMap::new();
        for t in toks {
            if let Some(i) = idf(t) {
                *v.entry(t.clone()).or_default() += i;
            }
        }
        v
    };
    let norm = |v: &HashMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let q = vector(&words(query));
    let qn = norm(&q);
    docs.iter()
        .map(|d| {
            let v = vector(d);
            let dn = norm(&v);
            if qn == 0.0 || dn == 0.0 {
                return 0.0;
            }
            q.iter().map(|(w, x)| x * v.get(w).unwrap_or(&0.0)).sum::<f64>() / (qn * dn)
        })
        .collect()
}

fn quantize(x: f64) -> i64 {
    (x * 1e9).round() as i64
}

/// Exhaustive top-k ids: score descending, id ascending on ties.
pub fn oracle_top_k(chunks: &[Chunk], query: &str, k: usize) -> Vec<(String, f64)> {
    let scores = tfidf_scores(chunks, query);
    let mut all: Vec<(String, f64)> = chunks.iter().map(|c| c.chunk_id.clone()).zip(scores).collect();
    all.sort_by(|a, b| quantize(b.1).cmp(&quantize(a.1)).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Checks the behaviour every backend must share. Returns the first
/// violation found.
pub fn contract_suite(backend: &dyn KnowledgeBackend, queries: &[&str]) -> Result<(), String> {
    let name = backend.name().to_string();
    for q in queries {
        let a = retrieve(backend, q, 5).map_err(|e| format!("{name}: {e}"))?;
        let b = retrieve(backend, q, 5).map_err(|e| format!("{name}: {e}"))?;
        let ids = |r: &RetrievalResult| r.units.iter().map(|u| u.id.clone()).collect::<Vec<_>>();
        if ids(&a) != ids(&b) {
            return Err(format!("{name}: query {q:?} is not deterministic"));
        }
        if a.units.len() > 5 {
            return Err(format!("{name}: {} units for top_k 5", a.units.len()));
        }
        for w in a.units.windows(2) {
            let ordered = w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id);
            if !ordered {
                return Err(format!("{name}: units {} and {} out of order", w[0].id, w[1].id));
            }
        }
        let uniq: BTreeSet<_> = a.units.iter().map(|u| &u.id).collect();
        if uniq.len() != a.units.len() {
            return Err(format!("{name}: duplicate unit ids"));
        }
        for k in 1..=7 {
            let r = retrieve(backend, q, k).map_err(|e| format!("{name}: {e}"))?;
            if r.units.len() > k {
                return Err(format!("{name}: top_k {k} returned {}", r.units.len()));
            }
            if ids(&r) != ids(&a)[..r.units.len().min(a.units.len())] && k <= 5 {
                return Err(format!("{name}: top_k {k} is not a prefix of top_k 5"));
            }
        }
    }
    for blank in ["", "   ", "\n\t"] {
        let r = retrieve(backend, blank, 5).map_err(|e| format!("{name}: {e}"))?;
        if !r.units.is_empty() {
            return Err(format!("{name}: blank query returned units"));
        }
    }
    if retrieve(backend, "anything", 0).is_ok() {
        return Err(format!("{name}: top_k 0 accepted"));
    }
    Ok(())
}

/// Backend wrapper that counts raw searches.
pub struct Counting<'a> {
    pub inner: &'a dyn KnowledgeBackend,
    pub searches: AtomicUsize,
}

impl<'a> Counting<'a> {
    pub fn new(inner: &'a dyn KnowledgeBackend) -> Self {
        Self {
            inner,
            searches: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.searches.load(Ordering::SeqCst)
    }
}

impl KnowledgeBackend for Counting<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn search(&self, query: &str, top_k: usize) -> Result<RetrievalResult, RetrievalError> {
        self.searches.fetch_add(1, Ordering::SeqCst);
        self.inner.search(query, top_k)
    }
}

pub struct Reply {
    pub status: u16,
    pub body: String,
}

/// Local HTTP server answering every request with `handler(method, url, body)`.
pub struct StubServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
    server: Arc<tiny_http::Server>,
    worker: Option<thread::JoinHandle<()>>,
}

impl StubServer {
    pub fn start(handler: impl Fn(&str, &str, &str) -> Reply + Send + 'static) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind stub server"));
        let url = format!("http://{}", server.server_addr().to_ip().expect("ip address"));
        let hits = Arc::new(AtomicUsize::new(0));
        let (srv, counter) = (server.clone(), hits.clone());
        let worker = thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                counter.fetch_add(1, Ordering::SeqCst);
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                let reply = handler(&req.method().to_string(), req.url(), &body);
                let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("header");
                let resp = tiny_http::Response::from_string(reply.body)
                    .with_status_code(reply.status)
                    .with_header(header);
                let _ = req.respond(resp);
            }
        });
        Self {
            url,
            hits,
            server,
            worker: Some(worker),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

pub fn chat_reply(text: &str) -> String {
    json!({
        "choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 3}
    })
    .to_string()
}

/// A small multi-hop corpus, dataset and scripted scenario on disk.
pub struct Fixture {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub n_questions: usize,
    /// Hand-computed contain-EM of the scripted answers.
    pub expected_em: f64,
}

pub const PEOPLE: [(&str, &str, &str); 10] = [
    ("Ada Vell", "Marrow", "Kestria"),
    ("Bran Osk", "Tilde", "Norvane"),
    ("Cora Lune", "Pellam", "Kestria"),
    ("Dov Ashe", "Quarry", "Ostmark"),
    ("Eli Rook", "Sable", "Norvane"),
    ("Fen Morrow", "Tarn", "Ostmark"),
    ("Gia Holt", "Umber", "Velland"),
    ("Hale Prim", "Vesper", "Velland"),
    ("Ivo Crane", "Wyck", "Kestria"),
    ("Jun Tallis", "Yarrow", "Norvane"),
];

pub fn corpus_lines() -> Vec<String> {
    let mut lines = Vec::new();
    for (i, (person, city, country)) in PEOPLE.iter().enumerate() {
        lines.push(
            json!({
                "id": format!("p{i}"),
                "title": person,
                "contents": format!("{person} was born in {city}. {person} worked as a cartographer for many years.")
            })
            .to_string(),
        );
        lines.push(
            json!({
                "id": format!("c{i}"),
                "title": city,
                "contents": format!("{city} is located in {country}. {city} is known for its river markets.")
            })
            .to_string(),
        );
    }
    lines
}

/// Scripted rl-angle rollouts: two searches, then an answer. Every third
/// question gets a wrong answer.
pub fn scripted_rollout(i: usize) -> Vec<String> {
    let (person, city, country) = PEOPLE[i];
    let answer = if i % 3 == 2 { "Atlantis" } else { country };
    vec![
        format!("<think>I need the birthplace of {person}.</think>\n<search>{person} born</search>"),
        format!("<think>{person} was born in {city}.</think>\n<search>{city} located in</search>"),
        format!("<think>{city} is in {answer}.</think>\n<answer>{answer}</answer>"),
    ]
}

pub fn write_fixture(dir: &Path, n: usize, extra_config: &str) -> Fixture {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("corpus.jsonl"), corpus_lines().join("\n") + "\n").unwrap();
    let mut dataset = Vec::new();
    let mut questions = serde_json::Map::new();
    let mut correct = 0;
    for i in 0..n {
        let (person, _, country) = PEOPLE[i % PEOPLE.len()];
        let qid = format!("q{i}");
        dataset.push(
            json!({
                "id": qid,
                "question": format!("In which country was {person} born?"),
                "golden_answers": [country],
                "gold_doc_ids": [format!("p{}", i % PEOPLE.len()), format!("c{}", i % PEOPLE.len())]
            })
            .to_string(),
        );
        let replies = scripted_rollout(i % PEOPLE.len());
        if !replies[2].contains("Atlantis") {
            correct += 1;
        }
        questions.insert(qid, Value::from(replies));
    }
    fs::write(dir.join("dev.jsonl"), dataset.join("\n") + "\n").unwrap();
    let scenario = json!({ "default": ["<answer>unknown</answer>"], "questions": questions });
    fs::write(dir.join("scenario.json"), scenario.to_string()).unwrap();
    let config = format!(
        "dataset = \"dev.jsonl\"\ncorpus = \"corpus.jsonl\"\npipeline = \"rl-angle\"\nbackend = \"dense-lexical\"\n\
         seeds = [0]\noutput_dir = \"out\"\ntiming = \"none\"\nparallel = 3\n{extra_config}\n\
         [gateway]\nkind = \"scripted\"\nscenario = \"scenario.json\"\n"
    );
    let config_path = dir.join("run.toml");
    fs::write(&config_path, config).unwrap();
    Fixture {
        dir: dir.to_path_buf(),
        config: config_path,
        n_questions: n,
        expected_em: correct as f64 / n as f64,
    }
}

/// Case-study corpus about two Istanbul landmarks.
pub fn landmark_chunks() -> Vec<Chunk> {
    vec![
        chunk(
            "laleli",
            "Laleli Mosque",
            "Laleli Mosque is located in Laleli. The Laleli Mosque is an 18th-century Ottoman imperial mosque in Laleli, Fatih, Istanbul, Turkey.",
        ),
        chunk(
            "esma",
            "Esma Sultan Mansion",
            "Esma Sultan Mansion is located in Ortakoy. The Esma Sultan Mansion is a historical yali on the Bosphorus in the Ortakoy neighborhood of Istanbul, Turkey.",
        ),
        chunk("fatih", "Fatih", "Laleli is part of Fatih. Fatih is a district of Istanbul."),
        chunk("ortakoy", "Ortakoy", "Ortakoy is part of Besiktas. Besiktas is a district of Istanbul."),
    ]
}

pub const CASE_QUESTION: &str = "Are the Laleli Mosque and Esma Sultan Mansion located in the same neighborhood?";

/// Scripted replies reproducing the three case-study columns. Elided parts
/// of the recorded transcripts are filled with the minimum needed to keep
/// the episode going.
pub fn case_on_demand() -> Vec<String> {
    vec![
        "To answer the question of whether the Laleli Mosque and Esma Sultan Mansion are located in the same neighborhood, I need to find the locations of both structures.<|begin_search_query|> location of Laleli Mosque <|end_search_query|>".into(),
        "The document places the mosque in Fatih.\nFinal Information\nThe Laleli Mosque is located in Laleli, Fatih, Istanbul, Turkey.".into(),
        "Based on the information gathered, the Laleli Mosque is in Laleli while the Esma Sultan Mansion is in Ortakoy.\n\\boxed{No}".into(),
    ]
}

pub fn case_search_r1() -> Vec<String> {
    vec![
        "<think>To answer the question \"Are the Laleli Mosque and Esma Sultan Mansion located in the same neighborhood?\", I will first reason through what I know about these two landmarks. I know that Laleli Mosque is a significant historical site in Istanbul, Turkey. I need more information about the location of Esma Sultan Mansion to determine if it shares a neighborhood with Laleli Mosque.\n</think>\n<search> \"Esma Sultan Mansion location Istanbul Turkey\" </search>".into(),
        "<think>Based on my search results: Laleli Mosque is in Laleli neighborhood. Esma Sultan Mansion is in Ortakoy neighborhood.\n\nSince Laleli Mosque is in Laleli neighborhood and Esma Sultan Mansion is in Ortakoy neighborhood, they are not located in the same neighborhood.\n</think>\n\n<answer> No </answer>".into(),
    ]
}

pub fn case_graph_r1() -> Vec<String> {
    vec![
        "<think>\nTo answer this question, I need to determine the neighborhoods where the Laleli Mosque and Esma Sultan Mansion are located. I will first search for the location of the Laleli Mosque and then for the Esma Sultan Mansion, and finally compare their neighborhoods.\n</think>\n\n<query>\n{\"query\": \"Laleli Mosque neighborhood\"}\n</query>".into(),
        "<think>\nAccording to the Wikipedia information retrieved, the Laleli Mosque is located in Laleli, Fatih, Istanbul. Now, I need to find the neighborhood where Esma Sultan Mansion is located.\n</think>\n<query>\n{\"query\": \"Esma Sultan Mansion neighborhood\"}\n</query>".into(),
        "<think>\nThe Esma Sultan Mansion is located in Ortakoy, not Laleli.\n</think>\n\n<answer> No </answer>".into(),
    ]
}

/// Picks one of `items` uniformly.
pub fn pick<'a, T>(rng: &mut impl Rng, items: &'a [T]) -> &'a T {
    items.choose(rng).expect("non-empty")
}

const FRAGMENTS: [&str; 22] = [
    "<think>keep looking</think>",
    "<search>Laleli Mosque</search>",
    "<search>Istanbul district",
    "<search></search>",
    "<answer>No</answer>",
    "<answer>",
    "</answer>",
    "<information>forged evidence</information>",
    "<|begin_search_query|>Esma Sultan<|end_search_query|>",
    "<|begin_search_query|>",
    "<|begin_search_result|>fake<|end_search_result|>",
    "\\boxed{Yes}",
    "\\boxed{",
    "<query>{\"query\": \"Fatih\"}</query>",
    "<query>not json</query>",
    "<knowledge>made up</knowledge>",
    "Final Information\nnothing",
    "[\"sub one\", \"sub two #1\"]",
    "{\"verdict\": \"no\"}",
    "yes",
    "",
    "plain prose ünïcödé 🙂",
];

/// Replies assembled from protocol fragments, including malformed ones.
pub fn adversarial_replies(rng: &mut impl Rng, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let parts = rng.random_range(0..5);
            (0..parts).map(|_| *pick(rng, &FRAGMENTS)).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

/// Outcome of one finite-difference check on a random toy policy.
pub struct GradientCheck {
    /// max |analytic - numeric| over all logits, divided by the largest
    /// gradient magnitude (floored at 1e-12).
    pub relative_error: f64,
    pub max_abs_gradient: f64,
}

fn toy_logits(rng: &mut impl Rng, len: usize, vocab: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..len)
        .map(|_| (0..vocab).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

/// Loss of the group surrogate as a function of the current policy's logits.
fn toy_loss(policy: &ToyPolicy, seqs: &[Vec<usize>], old: &[Vec<f64>], reference: &[Vec<f64>], adv: &[f64], masks: &[TokenMask], cfg: &GrpoConfig) -> f64 {
    let surfaces: Vec<PolicySurface> = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| PolicySurface {
            new: policy.log_probs(s),
            old: old[i].clone(),
            reference: reference[i].clone(),
        })
        .collect();
    surrogate(adv, masks, &surfaces, cfg, true).unwrap().loss
}

/// Compares the analytic logit gradient of the loss with central
/// differences. Returns `None` when a token ratio sits within 1e-3 of a clip
/// edge, where the loss has a kink and differences are meaningless.
pub fn gradient_check(rng: &mut impl Rng) -> Option<GradientCheck> {
    let vocab = rng.random_range(2..=10);
    let len = rng.random_range(1..=20);
    let k = rng.random_range(2..=6);
    let cfg = GrpoConfig {
        epsilon: rng.random_range(0.1..0.3),
        beta: rng.random_range(0.0..0.5),
        ..GrpoConfig::default()
    };
    let policy = ToyPolicy::new(toy_logits(rng, len, vocab, 2.0));
    let noise = toy_logits(rng, len, vocab, 0.4);
    let old_policy = ToyPolicy::new(policy.logits.iter().zip(&noise).map(|(r, n)| r.iter().zip(n).map(|(a, b)| a + b).collect()).collect());
    let ref_policy = ToyPolicy::new(toy_logits(rng, len, vocab, 2.0));
    let seqs: Vec<Vec<usize>> = (0..k).map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect()).collect();
    let old: Vec<Vec<f64>> = seqs.iter().map(|s| old_policy.log_probs(s)).collect();
    let reference: Vec<Vec<f64>> = seqs.iter().map(|s| ref_policy.log_probs(s)).collect();
    let adv: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let masks: Vec<TokenMask> = (0..k)
        .map(|_| TokenMask { bits: (0..len).map(|_| u8::from(rng.random_bool(0.7))).collect() })
        .collect();

    for (s, o) in seqs.iter().zip(&old) {
        for (n, o) in policy.log_probs(s).iter().zip(o) {
            let ratio = (n - o).exp();
            if (ratio - (1.0 - cfg.epsilon)).abs() < 1e-3 || (ratio - (1.0 + cfg.epsilon)).abs() < 1e-3 {
                return None;
            }
        }
    }

    let surfaces: Vec<PolicySurface> = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| PolicySurface { new: policy.log_probs(s), old: old[i].clone(), reference: reference[i].clone() })
        .collect();
    let d_logp = surrogate_gradient(&adv, &masks, &surfaces, &cfg).unwrap();
    let analytic = policy.logit_gradient(&seqs, &d_logp);

    let h = 1e-5;
    let mut max_diff: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for t in 0..len {
        for j in 0..vocab {
            let mut plus = policy.clone();
            plus.logits[t][j] += h;
            let mut minus = policy.clone();
            minus.logits[t][j] -= h;
            let numeric = (toy_loss(&plus, &seqs, &old, &reference, &adv, &masks, &cfg)
                - toy_loss(&minus, &seqs, &old, &reference, &adv, &masks, &cfg))
                / (2.0 * h);
            max_diff = max_diff.max((analytic[t][j] - numeric).abs());
            max_abs = max_abs.max(analytic[t][j].abs()).max(numeric.abs());
        }
    }
    Some(GradientCheck {
        relative_error: max_diff / max_abs.max(1e-12),
        max_abs_gradient: max_abs,
    })
}

pub const DIALECTS: [Dialect; 3] = [Dialect::ANGLE, Dialect::PIPE, Dialect::QUERY];

/// Random mixture of delimiter fragments, partial delimiters and filler.
pub fn fuzz_text(rng: &mut impl Rng, dialect: &Dialect) -> String {
    let mut pieces: Vec<String> = dialect.delimiters().iter().map(|d| d.to_string()).collect();
    for d in dialect.delimiters() {
        let cut = rng.random_range(1..d.len());
        pieces.push(d[..cut].to_string());
    }
    pieces.extend(["<", ">", "|", " ", "\n", "x", "é", "🙂", "\\boxed{", "}"].map(String::from));
    let n = rng.random_range(0..24);
    (0..n).map(|_| pick(rng, &pieces).clone()).collect()
}

/// Well-formed segment list: no delimiter inside any text, trimmed action
/// and answer payloads, no two plain segments in a row.
pub fn well_formed_segments(rng: &mut impl Rng, dialect: &Dialect) -> Vec<Segment> {
    const ALPHABET: [&str; 10] = ["a", "b", " ", "<", ">", "|", "/", "é", "\n", "{"];
    let kinds = [SegmentKind::Think, SegmentKind::SearchQuery, SegmentKind::Information, SegmentKind::Answer, SegmentKind::Plain];
    let mut out: Vec<Segment> = Vec::new();
    for _ in 0..rng.random_range(0..8) {
        let kind = *pick(rng, &kinds);
        if kind == SegmentKind::Plain && out.last().is_some_and(|s| s.kind == SegmentKind::Plain) {
            continue;
        }
        let mut text: String = (0..rng.random_range(0..12)).map(|_| *pick(rng, &ALPHABET)).collect();
        if dialect.delimiters().iter().any(|d| text.contains(d)) {
            continue;
        }
        match kind {
            SegmentKind::SearchQuery | SegmentKind::Answer => text = text.trim().to_string(),
            SegmentKind::Plain if text.trim().is_empty() => text = "p".into(),
            _ => {}
        }
        out.push(Segment::new(kind, text));
    }
    out
}

/// Spans ordered and disjoint, each gap whitespace only, plain text verbatim.
pub fn check_spans(text: &str, segments: &[Segment]) -> Result<(), String> {
    let mut end = 0;
    for s in segments {
        let (a, b) = s.span;
        if a < end || b < a || b > text.len() {
            return Err(format!("bad span {:?} after {end}", s.span));
        }
        if !text[end..a].trim().is_empty() {
            return Err(format!("non-blank gap {:?}", &text[end..a]));
        }
        if s.kind == SegmentKind::Plain && s.text != text[a..b] {
            return Err(format!("plain text differs from its span {:?}", s.span));
        }
        end = b;
    }
    if !text[end..].trim().is_empty() {
        return Err(format!("non-blank tail {:?}", &text[end..]));
    }
    Ok(())
}

/// Boundary consistency: a detected boundary is backed by a parsed segment.
pub fn check_boundary(text: &str, dialect: &Dialect) -> Result<(), String> {
    let segs = parse_segments(text, dialect);
    match detect_action_boundary(text, dialect) {
        Some(b) => {
            let kind = match b.kind {
                BoundaryKind::SearchIssued => SegmentKind::SearchQuery,
                BoundaryKind::AnswerIssued => SegmentKind::Answer,
            };
            if segs.iter().any(|s| s.kind == kind && s.text == b.payload) {
                Ok(())
            } else {
                Err(format!("boundary {b:?} has no segment in {text:?}"))
            }
        }
        None if segs.iter().any(|s| matches!(s.kind, SegmentKind::SearchQuery | SegmentKind::Answer)) => {
            Err(format!("missed boundary in {text:?}"))
        }
        None => Ok(()),
    }
}
