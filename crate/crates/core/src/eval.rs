//! Answer metrics, run aggregation and report rendering.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Termination, Trajectory};
use crate::cost::CostReport;

/// Version stamped into every report; readers reject other versions.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot aggregate zero runs")]
    NoRuns,
    #[error("cannot aggregate runs without questions")]
    NoQuestions,
    #[error("run {run} has question set differing from run 0")]
    MismatchedRuns { run: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 when some normalized gold answer is a substring of the normalized
/// prediction. Empty golds never match.
pub fn contain_em(prediction: &str, golds: &[String]) -> f64 {
    let pred = normalize_answer(prediction);
    let hit = golds.iter().any(|g| {
        let g = normalize_answer(g);
        !g.is_empty() && pred.contains(&g)
    });
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Token-multiset F1 between two answers after normalization.
pub fn f1_single(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    2.0 * common as f64 / (p.len() + g.len()) as f64
}

/// Best F1 over all golds; 0 when there are none.
pub fn f1(prediction: &str, golds: &[String]) -> f64 {
    golds.iter().map(|g| f1_single(prediction, g)).fold(0.0, f64::max)
}

/// Share of gold documents retrieved at any turn of the episode. `None` when
/// there are no gold documents.
pub fn retrieval_recall(traj: &Trajectory, gold_doc_ids: &BTreeSet<String>) -> Option<f64> {
    if gold_doc_ids.is_empty() {
        return None;
    }
    let seen: BTreeSet<&str> = traj
        .retrievals()
        .flat_map(|r| r.units.iter().map(|u| u.doc_id.as_str()))
        .collect();
    let hits = gold_doc_ids.iter().filter(|g| seen.contains(g.as_str())).count();
    Some(hits as f64 / gold_doc_ids.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRow {
    pub qid: String,
    pub em: f64,
    pub f1: f64,
    pub turns: f64,
    pub recall: Option<f64>,
    pub answer: String,
    pub termination: Termination,
    pub cost: CostReport,
}

impl QuestionRow {
    pub fn score(qid: &str, traj: &Trajectory, golds: &[String], gold_doc_ids: &BTreeSet<String>) -> Self {
        let answer = traj.final_answer.clone().unwrap_or_default();
        Self {
            qid: qid.to_string(),
            em: contain_em(&answer, golds),
            f1: f1(&answer, golds),
            turns: traj.search_turns() as f64,
            recall: retrieval_recall(traj, gold_doc_ids),
            answer,
            termination: traj.termination,
            cost: traj.cost.clone(),
        }
    }
}

/// One full pass over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub seed: u64,
    pub rows: Vec<QuestionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub normalization: String,
    pub std: String,
    pub recall: String,
    pub token_counting: String,
}

impl Default for ReportMetadata {
    fn default() -> Self {
        Self {
            normalization: "lowercase, strip punctuation, drop articles a/an/the, collapse whitespace".into(),
            std: "population std of per-run contain-EM means".into(),
            recall: "cumulative over all search turns of an episode".into(),
            token_counting: "whitespace-split".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub dataset: String,
    pub pipeline: String,
    pub backend: String,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub contain_em_mean: f64,
    pub f1_mean: f64,
    pub em_run_means: Vec<f64>,
    pub em_std_over_runs: f64,
    pub mean_search_turns: f64,
    pub retrieval_recall: Option<f64>,
    pub cost: CostReport,
    pub metadata: ReportMetadata,
    /// Per-question values averaged over runs; the answer is the first run's.
    pub per_question: Vec<QuestionRow>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs.iter().copied());
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Sums counters and retrieval-weights the per-retrieval means.
pub fn sum_costs<'a>(costs: impl IntoIterator<Item = &'a CostReport>) -> CostReport {
    let mut total = CostReport::default();
    let mut retrieval_seconds = 0.0;
    let mut context_tokens = 0.0;
    for c in costs {
        total.llm_calls += c.llm_calls;
        total.llm_tokens_in += c.llm_tokens_in;
        total.llm_tokens_out += c.llm_tokens_out;
        total.retrieval_calls += c.retrieval_calls;
        retrieval_seconds += c.mean_retrieval_seconds * c.retrieval_calls as f64;
        context_tokens += c.mean_context_tokens * c.retrieval_calls as f64;
    }
    if total.retrieval_calls > 0 {
        total.mean_retrieval_seconds = retrieval_seconds / total.retrieval_calls as f64;
        total.mean_context_tokens = context_tokens / total.retrieval_calls as f64;
    }
    total
}

/// Folds R runs over the same questions into one report. `build_cost`
/// supplies the construction fields.
pub fn aggregate(
    dataset: &str,
    pipeline: &str,
    backend: &str,
    runs: &[RunOutput],
    build_cost: &CostReport,
) -> Result<MetricsReport, EvalError> {
    let first = runs.first().ok_or(EvalError::NoRuns)?;
    if first.rows.is_empty() {
        return Err(EvalError::NoQuestions);
    }
    for (i, run) in runs.iter().enumerate() {
        let same = run.rows.len() == first.rows.len() && run.rows.iter().zip(&first.rows).all(|(a, b)| a.qid == b.qid);
        if !same {
            return Err(EvalError::MismatchedRuns { run: i });
        }
    }
    let r = runs.len() as f64;
    let all_rows = || runs.iter().flat_map(|run| run.rows.iter());
    let em_run_means: Vec<f64> = runs.iter().map(|run| mean(run.rows.iter().map(|x| x.em))).collect();

    let per_question = first
        .rows
        .iter()
        .enumerate()
        .map(|(i, row0)| {
            let rows: Vec<&QuestionRow> = runs.iter().map(|run| &run.rows[i]).collect();
            let recalls: Vec<f64> = rows.iter().filter_map(|x| x.recall).collect();
            QuestionRow {
                qid: row0.qid.clone(),
                em: rows.iter().map(|x| x.em).sum::<f64>() / r,
                f1: rows.iter().map(|x| x.f1).sum::<f64>() / r,
                turns: rows.iter().map(|x| x.turns).sum::<f64>() / r,
                recall: (!recalls.is_empty()).then(|| mean(recalls.iter().copied())),
                answer: row0.answer.clone(),
                termination: row0.termination,
                cost: sum_costs(rows.iter().map(|x| &x.cost)),
            }
        })
        .collect::<Vec<_>>();

    let recalls: Vec<f64> = all_rows().filter_map(|x| x.recall).collect();
    let mut cost = sum_costs(all_rows().map(|x| &x.cost));
    cost.construction_seconds = build_cost.construction_seconds;
    cost.corpus_tokens = build_cost.corpus_tokens;
    cost.construction_seconds_per_1m_tokens = build_cost.construction_seconds_per_1m_tokens;

    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        dataset: dataset.to_string(),
        pipeline: pipeline.to_string(),
        backend: backend.to_string(),
        n: per_question.len(),
        seeds: runs.iter().map(|run| run.seed).collect(),
        contain_em_mean: mean(all_rows().map(|x| x.em)),
        f1_mean: mean(all_rows().map(|x| x.f1)),
        em_std_over_runs: population_std(&em_run_means),
        em_run_means,
        mean_search_turns: mean(all_rows().map(|x| x.turns)),
        retrieval_recall: (!recalls.is_empty()).then(|| mean(recalls)),
        cost,
        metadata: ReportMetadata::default(),
        per_question,
    })
}

/// `mean±std` as percentages with two decimals, e.g. `42.36±0.22`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", mean * 100.0, std * 100.0)
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Per-question rows with columns qid, em, f1, turns, recall, answer.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["qid", "em", "f1", "turns", "recall", "answer"])?;
        for row in &self.per_question {
            w.write_record([
                row.qid.clone(),
                row.em.to_string(),
                row.f1.to_string(),
                row.turns.to_string(),
                row.recall.map(|x| x.to_string()).unwrap_or_default(),
                row.answer.clone(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 input"))
    }

    /// Aligned human-readable summary.
    pub fn to_text(&self) -> String {
        let recall = self
            .retrieval_recall
            .map(|x| format!("{:.2}", x * 100.0))
            .unwrap_or_else(|| "n/a".into());
        let rows = [
            ("dataset", self.dataset.clone()),
            ("pipeline", self.pipeline.clone()),
            ("backend", self.backend.clone()),
            ("questions", self.n.to_string()),
            ("runs", self.seeds.len().to_string()),
            ("contain EM", format_mean_std(self.contain_em_mean, self.em_std_over_runs)),
            ("F1", format!("{:.2}", self.f1_mean * 100.0)),
            ("search turns", format!("{:.2}", self.mean_search_turns)),
            ("recall", recall),
            ("llm calls", self.cost.llm_calls.to_string()),
            ("llm tokens in/out", format!("{}/{}", self.cost.llm_tokens_in, self.cost.llm_tokens_out)),
            ("retrieval calls", self.cost.retrieval_calls.to_string()),
            ("retrieval seconds (mean)", format!("{:.6}", self.cost.mean_retrieval_seconds)),
            ("context tokens (mean)", format!("{:.2}", self.cost.mean_context_tokens)),
            (
                "construction s / 1M tokens",
                format!("{:.4}", self.cost.construction_seconds_per_1m_tokens),
            ),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }
}
