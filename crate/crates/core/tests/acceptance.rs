//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::fs;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use agentic_search::agent::{run_pipeline, AgentSettings, EpisodeContext, Pipeline, Termination};
use agentic_search::cli::{cache_path, cmd_build, cmd_run, CacheEntry, Overrides, RunConfig};
use agentic_search::cost::{count_tokens, per_million_tokens};
use agentic_search::eval::{aggregate, contain_em, f1_single, format_mean_std, QuestionRow, RunOutput};
use agentic_search::grpo::{group_advantages, kl_estimate, surrogate, GrpoConfig, Norm, PolicySurface, TokenMask};
use agentic_search::knowledge::{
    build_dense_backend, build_entity_graph_backend, load_backend, remote_backend, retrieve, save_backend,
    DenseScorer, EmbeddingClient, EntityGraphBackend, Extractor, GraphConfig, KnowledgeBackend, LocalBackend,
    RemoteConfig, RuleExtractor,
};
use agentic_search::llm::ScriptedModel;
use agentic_search::protocol::{parse_segments, render_segments, Dialect, SegmentKind};
use common::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    ensure(start.elapsed() < limit, || format!("took {:.1?}, limit {limit:?}", start.elapsed()))
}

fn graph() -> EntityGraphBackend {
    build_entity_graph_backend(landmark_chunks(), &Extractor::Rule(RuleExtractor::default()), GraphConfig::default()).unwrap()
}

fn protocol_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..10_000 {
        let dialect = &DIALECTS[i % 3];
        let text = fuzz_text(&mut rng, dialect);
        let segs = std::panic::catch_unwind(|| parse_segments(&text, dialect)).map_err(|_| format!("parser panicked on {text:?}"))?;
        check_spans(&text, &segs)?;
        check_boundary(&text, dialect)?;

        let segs = well_formed_segments(&mut rng, dialect);
        let rendered = render_segments(&segs, dialect);
        let back: Vec<_> = parse_segments(&rendered, dialect).into_iter().map(|s| (s.kind, s.text)).collect();
        let want: Vec<_> = segs.into_iter().map(|s| (s.kind, s.text)).collect();
        ensure(back == want, || format!("round trip failed on {rendered:?}"))?;

        let angle = render_segments(&well_formed_segments(&mut rng, &Dialect::ANGLE), &Dialect::ANGLE);
        ensure(
            parse_segments(&angle, &Dialect::PIPE).iter().all(|s| s.kind == SegmentKind::Plain),
            || format!("dialect leak on {angle:?}"),
        )?;
    }

    let dense = build_dense_backend(landmark_chunks(), DenseScorer::Lexical).unwrap();
    let graph = graph();
    let settings = AgentSettings::default();
    let cases: [(Pipeline, Vec<String>, &dyn KnowledgeBackend); 3] = [
        (Pipeline::OnDemand, case_on_demand(), &dense),
        (Pipeline::RlAngle, case_search_r1(), &dense),
        (Pipeline::RlQuery, case_graph_r1(), &graph),
    ];
    for (p, replies, backend) in cases {
        let model = ScriptedModel::from_replies(replies).unwrap();
        let t = run_pipeline(p, CASE_QUESTION, EpisodeContext { backend, model: &model, settings: &settings })
            .map_err(|e| format!("{}: {e}", p.as_str()))?;
        ensure(
            t.termination == Termination::Answered && t.final_answer.as_deref() == Some("No"),
            || format!("{} ended {:?} with {:?}", p.as_str(), t.termination, t.final_answer),
        )?;
    }
    within(Duration::from_secs(30), start)?;
    Ok("10000 fuzz, round-trip and isolation cases; 3 case-study transcripts answered No".into())
}

fn budget_enforcement() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let dense = build_dense_backend(landmark_chunks(), DenseScorer::Lexical).unwrap();
    let graph = graph();
    let defaults = AgentSettings::default();
    let mut max_retrievals = 0;
    let mut max_calls = 0;
    let mut exhausted = 0;
    let mut call_cap_hit = 0;
    for i in 0..1000 {
        let p = Pipeline::ALL[i % Pipeline::ALL.len()];
        // odd episodes run under a tight random budget
        let mut settings = defaults.clone();
        if i % 2 == 1 {
            settings.budget.max_search_turns = rng.random_range(1..=5);
            settings.budget.max_total_llm_calls = rng.random_range(1..=8);
        }
        let budget = settings.budget;
        let replies = match i % 4 {
            // always asks for more evidence
            0 => vec![
                match p {
                    Pipeline::OnDemand => "<|begin_search_query|>Laleli<|end_search_query|>".to_string(),
                    Pipeline::RlQuery => "<query>{\"query\": \"Laleli\"}</query>".to_string(),
                    Pipeline::Orchestrated => "[\"Laleli\", \"Esma #1\", \"Fatih #2\"]".to_string(),
                    _ => "<search>Laleli</search>".to_string(),
                };
                80
            ],
            // never produces a usable action
            1 => vec!["thinking out loud".to_string(); 80],
            _ => adversarial_replies(&mut rng, 80),
        };
        let inner: &dyn KnowledgeBackend = if p == Pipeline::RlQuery { &graph } else { &dense };
        let backend = Counting::new(inner);
        let model = ScriptedModel::from_replies(replies).unwrap();
        let result = run_pipeline(p, CASE_QUESTION, EpisodeContext { backend: &backend, model: &model, settings: &settings });
        ensure(backend.count() <= budget.max_search_turns, || {
            format!("{} issued {} retrievals on episode {i}", p.as_str(), backend.count())
        })?;
        ensure(model.calls() <= budget.max_total_llm_calls, || {
            format!("{} made {} calls on episode {i}", p.as_str(), model.calls())
        })?;
        if let Ok(t) = &result {
            ensure(t.search_turns() <= budget.max_search_turns, || format!("trajectory over budget on episode {i}"))?;
            if t.termination == Termination::BudgetExhausted {
                exhausted += 1;
            }
        }
        if model.calls() == budget.max_total_llm_calls {
            call_cap_hit += 1;
        }
        max_retrievals = max_retrievals.max(backend.count());
        max_calls = max_calls.max(model.calls());
    }
    let budget = defaults.budget;
    ensure(max_retrievals == budget.max_search_turns, || format!("turn cap never reached (max {max_retrievals})"))?;
    ensure(call_cap_hit > 0, || "call cap never reached".into())?;
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "1000 episodes within their caps (max {max_retrievals} retrievals, {max_calls} calls; defaults {} and {}); {call_cap_hit} hit the call cap, {exhausted} exhausted",
        budget.max_search_turns, budget.max_total_llm_calls
    ))
}

/// Deterministic bag-of-words hashing embedder.
struct Hashing;

impl EmbeddingClient for Hashing {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, String> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0f32; 16];
                for w in t.split_whitespace() {
                    v[(agentic_search::text::fnv1a64(w.to_lowercase().as_bytes()) % 16) as usize] += 1.0;
                }
                v
            })
            .collect())
    }
}

fn retrieval_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let chunks = synthetic_chunks(&mut rng, 1000, 200);
    let backend = build_dense_backend(chunks.clone(), DenseScorer::Lexical).unwrap();
    for _ in 0..100 {
        let len = rng.random_range(1..6);
        let q = random_text(&mut rng, 240, len);
        let got = retrieve(&backend, &q, 5).map_err(|e| e.to_string())?;
        let want = oracle_top_k(&chunks, &q, 5);
        let got_ids: Vec<&str> = got.units.iter().map(|u| u.id.as_str()).collect();
        let want_ids: Vec<&str> = want.iter().map(|(id, _)| id.as_str()).collect();
        ensure(got_ids == want_ids, || format!("query {q:?}: got {got_ids:?}, want {want_ids:?}"))?;
        for (u, (_, s)) in got.units.iter().zip(&want) {
            ensure((u.score - s).abs() < 1e-9, || format!("score {} vs {s} for {q:?}", u.score))?;
        }
    }

    let dense: LocalBackend = build_dense_backend(landmark_chunks(), DenseScorer::Lexical).unwrap().into();
    let embedding: LocalBackend = build_dense_backend(landmark_chunks(), DenseScorer::Embedding(Arc::new(Hashing))).unwrap().into();
    let graph: LocalBackend = graph().into();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("graph.json");
    save_backend(&graph, &path).map_err(|e| e.to_string())?;
    let reloaded = load_backend(&path, None).map_err(|e| e.to_string())?;
    let served = Arc::new(build_dense_backend(landmark_chunks(), DenseScorer::Lexical).unwrap());
    let server = StubServer::start(move |_, _, body| {
        let req: serde_json::Value = serde_json::from_str(body).unwrap();
        let r = served.search(req["query"].as_str().unwrap(), req["top_k"].as_u64().unwrap() as usize).unwrap();
        let results: Vec<_> = r.units.iter().map(|u| json!({"id": u.id, "title": u.title, "text": u.text, "score": u.score})).collect();
        Reply { status: 200, body: json!({ "results": results }).to_string() }
    });
    let remote = remote_backend(&server.url, "remote", RemoteConfig::default());
    let queries = ["Laleli Mosque", "Esma Sultan Mansion", "Istanbul district", "nothing here", "Fatih", "   "];
    let all: [(&str, &dyn KnowledgeBackend); 5] = [
        ("dense", &dense),
        ("embedding", &embedding),
        ("graph", &graph),
        ("reloaded graph", &reloaded),
        ("remote", &remote),
    ];
    for (label, b) in all {
        contract_suite(b, &queries).map_err(|e| format!("{label}: {e}"))?;
    }
    within(Duration::from_secs(60), start)?;
    Ok("100 queries over 1000 chunks match exhaustive top-5; 5 backends pass the contract suite".into())
}

fn grpo_math() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(47);

    let mut worst_center: f64 = 0.0;
    for _ in 0..10_000 {
        let k = rng.random_range(2..16);
        let rewards: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        for norm in [Norm::default(), Norm::MeanOnly] {
            let adv = group_advantages(&rewards, norm).map_err(|e| e.to_string())?;
            worst_center = worst_center.max(adv.iter().sum::<f64>().abs());
        }
    }
    ensure(worst_center <= 1e-9, || format!("advantage sum {worst_center:e}"))?;

    let cfg = GrpoConfig::default();
    let mut worst_clip: f64 = 0.0;
    for _ in 0..2000 {
        let (k, len) = (rng.random_range(2..6), rng.random_range(1..20));
        let bound = (1.0 + cfg.epsilon).ln().min(-(1.0 - cfg.epsilon).ln()) * 0.99;
        let mut surfaces = Vec::new();
        for _ in 0..k {
            let old: Vec<f64> = (0..len).map(|_| rng.random_range(-6.0..-0.5)).collect();
            let new = old.iter().map(|o| o + rng.random_range(-bound..bound)).collect();
            let reference = (0..len).map(|_| rng.random_range(-6.0..-0.1)).collect();
            surfaces.push(PolicySurface { new, old, reference });
        }
        let adv: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let masks: Vec<TokenMask> = (0..k).map(|_| TokenMask { bits: (0..len).map(|_| u8::from(rng.random_bool(0.8))).collect() }).collect();
        let clipped = surrogate(&adv, &masks, &surfaces, &cfg, true).unwrap().objective;
        let plain = surrogate(&adv, &masks, &surfaces, &cfg, false).unwrap().objective;
        worst_clip = worst_clip.max((clipped - plain).abs());

        // flipping a masked token's log-prob must not move the loss at all
        let loss = surrogate(&adv, &masks, &surfaces, &cfg, true).unwrap().loss;
        let mut flipped = surfaces.clone();
        for (s, m) in flipped.iter_mut().zip(&masks) {
            for (t, bit) in m.bits.iter().enumerate() {
                if *bit == 0 {
                    s.new[t] = rng.random_range(-20.0..0.0);
                }
            }
        }
        let after = surrogate(&adv, &masks, &flipped, &cfg, true).unwrap().loss;
        ensure(after.to_bits() == loss.to_bits(), || format!("masked tokens moved the loss: {loss} -> {after}"))?;
    }
    ensure(worst_clip <= 1e-12, || format!("clip inactivity gap {worst_clip:e}"))?;

    let mut checked = 0;
    let mut worst_fd: f64 = 0.0;
    while checked < 100 {
        if let Some(c) = gradient_check(&mut rng) {
            worst_fd = worst_fd.max(c.relative_error);
            checked += 1;
        }
    }
    ensure(worst_fd <= 1e-5, || format!("finite-difference relative error {worst_fd:e}"))?;

    for _ in 0..10_000 {
        let (a, b) = (rng.random_range(-60.0..0.0), rng.random_range(-60.0..0.0));
        let kl = kl_estimate(a, b);
        ensure(kl >= 0.0, || format!("kl({a}, {b}) = {kl}"))?;
    }
    within(Duration::from_secs(120), start)?;
    Ok(format!(
        "centering {worst_center:.1e}, clip gap {worst_clip:.1e}, masked flips exact, fd error {worst_fd:.1e} over 100 policies, KL >= 0 on 10000 inputs"
    ))
}

/// Independent answer normalization: lowercase, strip punctuation, drop articles.
fn oracle_normalize(s: &str) -> Vec<String> {
    const PUNCT: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
    let lowered: String = s.to_lowercase().chars().filter(|c| !PUNCT.contains(*c)).collect();
    lowered
        .split_whitespace()
        .filter(|w| !["a", "an", "the"].contains(w))
        .map(String::from)
        .collect()
}

/// F1 from an explicit multiset intersection: each gold token may be used once.
fn oracle_f1(pred: &str, gold: &str) -> f64 {
    let p = oracle_normalize(pred);
    let g = oracle_normalize(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut used = vec![false; g.len()];
    let mut common = 0;
    for t in &p {
        if let Some(j) = (0..g.len()).find(|&j| !used[j] && &g[j] == t) {
            used[j] = true;
            common += 1;
        }
    }
    2.0 * common as f64 / (p.len() + g.len()) as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let words = ["the", "a", "an", "Paris", "paris,", "No", "no", "river", "river.", "Q&A", "ünï", "1999", "-"];
    for _ in 0..200 {
        let sentence = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(0..7);
            (0..n).map(|_| *pick(rng, &words)).collect::<Vec<_>>().join(" ")
        };
        let (p, g) = (sentence(&mut rng), sentence(&mut rng));
        let (got, want) = (f1_single(&p, &g), oracle_f1(&p, &g));
        ensure(got == want, || format!("f1({p:?}, {g:?}) = {got}, oracle {want}"))?;
    }

    let golds = |g: &[&str]| g.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let table: [(&str, Vec<String>, f64); 12] = [
        ("No", golds(&["No"]), 1.0),
        ("no.", golds(&["No"]), 1.0),
        ("The answer is No", golds(&["no"]), 1.0),
        ("Yes", golds(&["No"]), 0.0),
        ("north", golds(&["no"]), 1.0),
        ("", golds(&["No"]), 0.0),
        ("anything", golds(&["the"]), 0.0),
        ("anything", vec![], 0.0),
        ("Barack Obama", golds(&["Michelle Obama", "Barack Obama"]), 1.0),
        ("Obama", golds(&["Barack Obama"]), 0.0),
        ("the  United   States", golds(&["United States"]), 1.0),
        ("U.S.A", golds(&["usa"]), 1.0),
    ];
    for (pred, g, want) in &table {
        let got = contain_em(pred, g);
        ensure(got == *want, || format!("contain_em({pred:?}, {g:?}) = {got}, want {want}"))?;
    }

    let run = |seed: u64, correct: usize| RunOutput {
        seed,
        rows: (0..5000)
            .map(|i| QuestionRow {
                qid: format!("q{i}"),
                em: if i < correct { 1.0 } else { 0.0 },
                f1: 0.0,
                turns: 1.0,
                recall: None,
                answer: String::new(),
                termination: Termination::Answered,
                cost: Default::default(),
            })
            .collect(),
    };
    let report = aggregate("hotpotqa", "rl-angle", "dense-lexical", &[run(0, 2107), run(1, 2129)], &Default::default())
        .map_err(|e| e.to_string())?;
    let rendered = format_mean_std(report.contain_em_mean, report.em_std_over_runs);
    ensure(rendered == "42.36±0.22", || format!("rendered {rendered}"))?;
    ensure(report.to_text().contains("42.36±0.22"), || "text report lacks the mean±std cell".into())?;
    Ok("200 F1 pairs match the multiset oracle; 12 EM cases exact; two runs render 42.36±0.22".into())
}

fn e2e_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = write_fixture(a.path(), 10, "");
    let fb = write_fixture(b.path(), 10, "");
    let ca = RunConfig::load(&fa.config).map_err(|e| e.to_string())?;
    let cb = RunConfig::load(&fb.config).map_err(|e| e.to_string())?;

    let cold = cmd_run(&ca).map_err(|e| e.to_string())?;
    let first = fs::read(&cold.report_path).unwrap();
    let other = cmd_run(&cb).map_err(|e| e.to_string())?;
    ensure(fs::read(&other.report_path).unwrap() == first, || "two cold invocations differ".into())?;
    let warm = cmd_run(&ca).map_err(|e| e.to_string())?;
    ensure(warm.cache_hits == 10 && warm.episodes_run == 0, || format!("warm run hit {} of 10", warm.cache_hits))?;
    ensure(fs::read(&warm.report_path).unwrap() == first, || "cache-warm report differs".into())?;
    fs::remove_dir_all(a.path().join("out/cache")).unwrap();
    let again = cmd_run(&ca).map_err(|e| e.to_string())?;
    ensure(fs::read(&again.report_path).unwrap() == first, || "report differs after deleting the cache".into())?;
    ensure(cold.report.n == 10, || format!("n = {}", cold.report.n))?;
    Ok(format!("10 questions, {} bytes identical across cold, second cold, warm and cache-cleared runs", first.len()))
}

fn cost_accounting() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_fixture(dir.path(), 10, "");
    let cfg = RunConfig::load(&fx.config).map_err(|e| e.to_string())?;
    let summary = cmd_run(&cfg).map_err(|e| e.to_string())?;
    let (mut calls, mut tokens_in, mut tokens_out, mut retrievals) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..10 {
        let path = cache_path(&cfg, &summary.config_hash, 0, &format!("q{i}"));
        let entry: CacheEntry = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        let t = &entry.trajectory;
        calls += t.calls.len() as u64;
        tokens_in += t.calls.iter().map(|c| c.prompt_tokens).sum::<u64>();
        tokens_out += t.calls.iter().map(|c| c.completion_tokens).sum::<u64>();
        retrievals += t.search_turns() as u64;
    }
    let c = &summary.report.cost;
    ensure(
        (c.llm_calls, c.llm_tokens_in, c.llm_tokens_out, c.retrieval_calls) == (calls, tokens_in, tokens_out, retrievals),
        || format!("report {c:?} vs call records {calls}/{tokens_in}/{tokens_out}/{retrievals}"),
    )?;

    // per-call records against the requests the model actually received
    let dense = build_dense_backend(landmark_chunks(), DenseScorer::Lexical).unwrap();
    let model = ScriptedModel::from_replies(case_search_r1()).unwrap();
    let settings = AgentSettings::default();
    let t = run_pipeline(Pipeline::RlAngle, CASE_QUESTION, EpisodeContext { backend: &dense, model: &model, settings: &settings })
        .map_err(|e| e.to_string())?;
    let sent: u64 = model.requests().iter().flat_map(|r| r.messages.iter()).map(|m| count_tokens(&m.content)).sum();
    ensure(t.cost.llm_tokens_in == sent, || format!("tokens in {} vs {sent} sent", t.cost.llm_tokens_in))?;

    // construction cost on a corpus of exactly 100000 whitespace tokens
    let words: Vec<String> = (0..100).map(|i| format!("tok{}", i % 37)).collect();
    let lines: Vec<String> = (0..1000)
        .map(|i| json!({"id": format!("d{i}"), "contents": words.join(" ")}).to_string())
        .collect();
    let built = tempfile::tempdir().unwrap();
    fs::write(built.path().join("corpus.jsonl"), lines.join("\n")).unwrap();
    fs::write(built.path().join("build.toml"), "corpus = \"corpus.jsonl\"\nbackend = \"dense-lexical\"\ntiming = \"wall\"\n").unwrap();
    let mut bcfg = RunConfig::load(&built.path().join("build.toml")).map_err(|e| e.to_string())?;
    bcfg.apply(&Overrides::default());
    let b = cmd_build(&bcfg).map_err(|e| e.to_string())?;
    ensure(b.cost.corpus_tokens == 100_000, || format!("corpus tokens {}", b.cost.corpus_tokens))?;
    let expected = b.cost.construction_seconds * 10.0;
    ensure(
        (b.cost.construction_seconds_per_1m_tokens - expected).abs() <= 1e-12 * expected.max(1.0),
        || format!("per-1M {} vs {expected}", b.cost.construction_seconds_per_1m_tokens),
    )?;
    ensure(per_million_tokens(3.0, 250_000) == 12.0, || "3 s over 250k tokens is not 12 s per 1M".into())?;
    Ok(format!(
        "{calls} calls, {tokens_in} tokens in, {tokens_out} out match the call records; 100000-token build normalizes to {:.4} s per 1M",
        b.cost.construction_seconds_per_1m_tokens
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("protocol suite", protocol_suite),
        ("budget enforcement", budget_enforcement),
        ("retrieval oracle", retrieval_oracle),
        ("grpo math", grpo_math),
        ("metric oracles", metric_oracles),
        ("end-to-end determinism", e2e_determinism),
        ("cost accounting", cost_accounting),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.2}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.2}s): {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
