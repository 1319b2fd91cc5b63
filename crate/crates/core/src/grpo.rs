//! Group-relative policy optimisation math over sampled-token log-probs.
//!
//! Nothing here touches model weights. Rollouts are scored, advantages are
//! normalized within their group, retrieved tokens are masked out, and the
//! clipped surrogate with a KL penalty is evaluated (with its gradient) for
//! whatever per-token log-probabilities an external trainer supplies. A tiny
//! softmax policy is included so the gradient can be checked end to end.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_pipeline, AgentError, AgentSettings, EpisodeContext, Pipeline, Termination, Trajectory};
use crate::eval::contain_em;
use crate::protocol::{has_degraded_tags, tokenize, Dialect, Segment, SegmentKind};

pub const DEFAULT_GROUP_SIZE: usize = 8;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group of {0} rollout(s): advantages need at least 2")]
    GroupTooSmall(usize),
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

/// Reward = outcome_weight * contain-EM + (1 - outcome_weight) * format validity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSpec {
    pub outcome_weight: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self { outcome_weight: 0.9 }
    }
}

impl RewardSpec {
    pub fn format_weight(&self) -> f64 {
        1.0 - self.outcome_weight
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(0.0..=1.0).contains(&self.outcome_weight) {
            return Err(GrpoError::Config(format!(
                "outcome_weight {} outside [0, 1]",
                self.outcome_weight
            )));
        }
        Ok(())
    }
}

/// 1 when the episode ended with an answer and no step carries a stray tag.
pub fn format_valid(traj: &Trajectory) -> f64 {
    let dialect = Dialect::from_name(traj.dialect);
    let clean = traj.steps.iter().all(|s| !has_degraded_tags(&s.segments, &dialect));
    if traj.termination == Termination::Answered && clean {
        1.0
    } else {
        0.0
    }
}

pub fn trajectory_reward(traj: &Trajectory, golds: &[String], spec: &RewardSpec) -> f64 {
    let outcome = traj.final_answer.as_deref().map_or(0.0, |a| contain_em(a, golds));
    spec.outcome_weight * outcome + spec.format_weight() * format_valid(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// Divide by the population std, floored.
    Std { floor: f64 },
    /// Only subtract the group mean.
    MeanOnly,
}

impl Default for Norm {
    fn default() -> Self {
        Norm::Std { floor: 1e-6 }
    }
}

pub fn group_advantages(rewards: &[f64], norm: Norm) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let scale = match norm {
        Norm::Std { floor } => {
            let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            var.sqrt().max(floor)
        }
        Norm::MeanOnly => 1.0,
    };
    Ok(rewards.iter().map(|r| (r - mean) / scale).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub norm: Norm,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta: 1e-3,
            norm: Norm::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(GrpoError::Config(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if !(self.beta >= 0.0) {
            return Err(GrpoError::Config(format!("beta {} is negative", self.beta)));
        }
        Ok(())
    }
}

/// Which tokens count toward the loss. Covers the prompt tokens first, then
/// the trajectory text tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    pub bits: Vec<u8>,
}

impl TokenMask {
    pub fn ones(n: usize) -> Self {
        Self { bits: vec![1; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn active(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }
}

/// Prompt tokens followed by text tokens, as strings.
pub fn trajectory_tokens(traj: &Trajectory) -> Vec<String> {
    let dialect = Dialect::from_name(traj.dialect);
    let text = traj.text();
    tokenize(&traj.prompt, &dialect)
        .into_iter()
        .map(|(a, b)| traj.prompt[a..b].to_string())
        .chain(tokenize(&text, &dialect).into_iter().map(|(a, b)| text[a..b].to_string()))
        .collect()
}

pub fn token_mask(traj: &Trajectory) -> TokenMask {
    token_mask_with(traj, true)
}

/// With `mask_information` off, retrieved evidence is trained on like
/// generated text; the prompt stays masked either way.
pub fn token_mask_with(traj: &Trajectory, mask_information: bool) -> TokenMask {
    let dialect = Dialect::from_name(traj.dialect);
    let text = traj.text();
    let prompt_tokens = tokenize(&traj.prompt, &dialect).len();
    let info: Vec<(usize, usize)> = if mask_information {
        info_spans(&traj.segments())
    } else {
        Vec::new()
    };
    let mut bits = vec![0u8; prompt_tokens];
    bits.extend(tokenize(&text, &dialect).into_iter().map(|(start, _)| {
        u8::from(!info.iter().any(|&(a, b)| start >= a && start < b))
    }));
    TokenMask { bits }
}

fn info_spans(segments: &[Segment]) -> Vec<(usize, usize)> {
    segments
        .iter()
        .filter(|s| s.kind == SegmentKind::Information)
        .map(|s| s.span)
        .collect()
}

/// Per-token log-probs of one trajectory under the current, behaviour and
/// reference policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySurface {
    pub new: Vec<f64>,
    pub old: Vec<f64>,
    pub reference: Vec<f64>,
}

impl PolicySurface {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.new.len() != self.old.len() || self.new.len() != self.reference.len() {
            return Err(GrpoError::Misaligned(format!(
                "surface lengths new={} old={} ref={}",
                self.new.len(),
                self.old.len(),
                self.reference.len()
            )));
        }
        let bad = self.new.iter().chain(&self.old).chain(&self.reference).find(|v| !(**v <= 0.0));
        if let Some(v) = bad {
            return Err(GrpoError::Misaligned(format!("log-prob {v} is not <= 0")));
        }
        Ok(())
    }
}

/// Non-negative per-token KL estimate, `e^x - x - 1` with `x = ref - new`.
pub fn kl_estimate(logp_new: f64, logp_ref: f64) -> f64 {
    let x = logp_ref - logp_new;
    x.exp_m1() - x
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub loss: f64,
    /// Surrogate minus weighted KL per token; masked tokens hold 0.
    pub per_token_terms: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroupBatch {
    pub question: String,
    pub golden_answers: Vec<String>,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub masks: Vec<TokenMask>,
}

impl GroupBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let k = self.trajectories.len();
        if self.rewards.len() != k || self.advantages.len() != k || self.masks.len() != k {
            return Err(GrpoError::Misaligned(format!(
                "group of {k} with {} rewards, {} advantages, {} masks",
                self.rewards.len(),
                self.advantages.len(),
                self.masks.len()
            )));
        }
        Ok(())
    }
}

pub fn grpo_objective(batch: &GroupBatch, surfaces: &[PolicySurface], cfg: &GrpoConfig) -> Result<ObjectiveValue, GrpoError> {
    batch.validate()?;
    surrogate(&batch.advantages, &batch.masks, surfaces, cfg, true)
}

/// Gradient of the loss with respect to every `new` log-prob.
pub fn grpo_gradient(batch: &GroupBatch, surfaces: &[PolicySurface], cfg: &GrpoConfig) -> Result<Vec<Vec<f64>>, GrpoError> {
    batch.validate()?;
    surrogate_gradient(&batch.advantages, &batch.masks, surfaces, cfg)
}

fn check_aligned(advantages: &[f64], masks: &[TokenMask], surfaces: &[PolicySurface], cfg: &GrpoConfig) -> Result<(), GrpoError> {
    cfg.validate()?;
    if advantages.len() != masks.len() || advantages.len() != surfaces.len() {
        return Err(GrpoError::Misaligned(format!(
            "{} advantages, {} masks, {} surfaces",
            advantages.len(),
            masks.len(),
            surfaces.len()
        )));
    }
    if advantages.is_empty() {
        return Err(GrpoError::GroupTooSmall(0));
    }
    for (i, (m, s)) in masks.iter().zip(surfaces).enumerate() {
        s.validate()?;
        if m.len() != s.new.len() {
            return Err(GrpoError::Misaligned(format!(
                "trajectory {i}: mask has {} tokens, surface has {}",
                m.len(),
                s.new.len()
            )));
        }
    }
    Ok(())
}

/// The clipped surrogate with KL penalty, averaged per trajectory over its
/// unmasked tokens and then over the group. `clip = false` drops the clip
/// branch, which is only useful for comparisons.
pub fn surrogate(
    advantages: &[f64],
    masks: &[TokenMask],
    surfaces: &[PolicySurface],
    cfg: &GrpoConfig,
    clip: bool,
) -> Result<ObjectiveValue, GrpoError> {
    check_aligned(advantages, masks, surfaces, cfg)?;
    let k = advantages.len() as f64;
    let mut objective = 0.0;
    let mut per_token_terms = Vec::with_capacity(surfaces.len());
    for ((adv, mask), s) in advantages.iter().zip(masks).zip(surfaces) {
        let n = mask.active();
        let mut terms = vec![0.0; s.new.len()];
        for t in (0..s.new.len()).filter(|&t| mask.bits[t] == 1) {
            let ratio = (s.new[t] - s.old[t]).exp();
            let plain = ratio * adv;
            let policy = if clip {
                plain.min(ratio.clamp(1.0 - cfg.epsilon, 1.0 + cfg.epsilon) * adv)
            } else {
                plain
            };
            terms[t] = policy - cfg.beta * kl_estimate(s.new[t], s.reference[t]);
        }
        if n > 0 {
            objective += terms.iter().sum::<f64>() / n as f64;
        }
        per_token_terms.push(terms);
    }
    objective /= k;
    Ok(ObjectiveValue {
        objective,
        loss: -objective,
        per_token_terms,
    })
}

pub fn surrogate_gradient(
    advantages: &[f64],
    masks: &[TokenMask],
    surfaces: &[PolicySurface],
    cfg: &GrpoConfig,
) -> Result<Vec<Vec<f64>>, GrpoError> {
    check_aligned(advantages, masks, surfaces, cfg)?;
    let k = advantages.len() as f64;
    let mut grads = Vec::with_capacity(surfaces.len());
    for ((adv, mask), s) in advantages.iter().zip(masks).zip(surfaces) {
        let n = mask.active();
        let mut g = vec![0.0; s.new.len()];
        for t in (0..s.new.len()).filter(|&t| mask.bits[t] == 1) {
            let ratio = (s.new[t] - s.old[t]).exp();
            let plain = ratio * adv;
            let clipped = ratio.clamp(1.0 - cfg.epsilon, 1.0 + cfg.epsilon) * adv;
            // The clipped branch is flat in ratio whenever it is the smaller one.
            let policy = if plain <= clipped { plain } else { 0.0 };
            let x = s.reference[t] - s.new[t];
            let d_objective = (policy + cfg.beta * x.exp_m1()) / (k * n as f64);
            g[t] = -d_objective;
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Position-wise softmax policy over a small vocabulary: one logit row per
/// position, shared by every sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    pub logits: Vec<Vec<f64>>,
}

impl ToyPolicy {
    pub fn new(logits: Vec<Vec<f64>>) -> Self {
        Self { logits }
    }

    pub fn vocab(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    fn log_softmax(row: &[f64]) -> Vec<f64> {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter().map(|v| v - lse).collect()
    }

    /// Log-prob of each token of `tokens` at its position.
    pub fn log_probs(&self, tokens: &[usize]) -> Vec<f64> {
        tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| Self::log_softmax(&self.logits[t])[tok])
            .collect()
    }

    /// Chains per-token gradients `d_logp[i][t]` of sequence `i` back onto
    /// the logits: `d logp / d logit_j = 1{j = tok} - softmax_j`.
    pub fn logit_gradient(&self, sequences: &[Vec<usize>], d_logp: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let probs: Vec<Vec<f64>> = self
            .logits
            .iter()
            .map(|row| Self::log_softmax(row).into_iter().map(f64::exp).collect())
            .collect();
        let mut grad = vec![vec![0.0; self.vocab()]; self.logits.len()];
        for (seq, g) in sequences.iter().zip(d_logp) {
            for (t, (&tok, &gt)) in seq.iter().zip(g).enumerate() {
                for (j, p) in probs[t].iter().enumerate() {
                    let indicator = if j == tok { 1.0 } else { 0.0 };
                    grad[t][j] += gt * (indicator - p);
                }
            }
        }
        grad
    }

    /// Exact KL(self || reference) of the categorical at `position`.
    pub fn exact_kl(&self, reference: &ToyPolicy, position: usize) -> f64 {
        let p = Self::log_softmax(&self.logits[position]);
        let q = Self::log_softmax(&reference.logits[position]);
        p.iter().zip(&q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum()
    }
}

/// How a group of rollouts is sampled and scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupSpec {
    pub group_size: usize,
    pub temperature: f64,
    pub seed: u64,
    pub reward: RewardSpec,
    pub norm: Norm,
    pub mask_information: bool,
}

impl Default for GroupSpec {
    fn default() -> Self {
        Self {
            group_size: DEFAULT_GROUP_SIZE,
            temperature: 1.0,
            seed: 0,
            reward: RewardSpec::default(),
            norm: Norm::default(),
            mask_information: true,
        }
    }
}

/// Runs `group_size` episodes of `pipeline` one after another, rollout k
/// seeded with `seed + k`, then scores, normalizes and masks them.
pub fn collect_group(
    question: &str,
    golds: &[String],
    pipeline: Pipeline,
    ctx: EpisodeContext<'_>,
    spec: &GroupSpec,
) -> Result<GroupBatch, GrpoError> {
    spec.reward.validate()?;
    if spec.group_size < 2 {
        return Err(GrpoError::GroupTooSmall(spec.group_size));
    }
    let mut trajectories = Vec::with_capacity(spec.group_size);
    for k in 0..spec.group_size {
        let settings = AgentSettings {
            temperature: spec.temperature,
            seed: Some(spec.seed + k as u64),
            ..ctx.settings.clone()
        };
        let rollout_ctx = EpisodeContext {
            settings: &settings,
            ..ctx
        };
        trajectories.push(run_pipeline(pipeline, question, rollout_ctx)?);
    }
    let rewards: Vec<f64> = trajectories
        .iter()
        .map(|t| trajectory_reward(t, golds, &spec.reward))
        .collect();
    let advantages = group_advantages(&rewards, spec.norm)?;
    let masks = trajectories
        .iter()
        .map(|t| token_mask_with(t, spec.mask_information))
        .collect();
    Ok(GroupBatch {
        question: question.to_string(),
        golden_answers: golds.to_vec(),
        trajectories,
        rewards,
        advantages,
        masks,
    })
}

/// One line of the batch export file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub question: String,
    pub golden_answers: Vec<String>,
    /// Position of the rollout in its group.
    pub index: usize,
    pub prompt: String,
    pub text: String,
    /// Segments with byte spans into `text`.
    pub segments: Vec<Segment>,
    /// Prompt tokens then text tokens; aligned with `mask`.
    pub tokens: Vec<String>,
    pub mask: Vec<u8>,
    pub reward: f64,
    pub advantage: f64,
    pub trajectory: Trajectory,
}

pub fn export_records(batch: &GroupBatch) -> Result<Vec<ExportRecord>, GrpoError> {
    batch.validate()?;
    Ok(batch
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| ExportRecord {
            question: batch.question.clone(),
            golden_answers: batch.golden_answers.clone(),
            index: i,
            prompt: t.prompt.clone(),
            text: t.text(),
            segments: t.segments(),
            tokens: trajectory_tokens(t),
            mask: batch.masks[i].bits.clone(),
            reward: batch.rewards[i],
            advantage: batch.advantages[i],
            trajectory: t.clone(),
        })
        .collect())
}

/// Writes one JSON object per rollout and returns how many were written.
pub fn export_batch(batch: &GroupBatch, path: &Path) -> Result<usize, GrpoError> {
    let records = export_records(batch)?;
    let mut out = BufWriter::new(File::create(path)?);
    for r in &records {
        serde_json::to_writer(&mut out, r).map_err(|source| GrpoError::Json { line: r.index + 1, source })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records.len())
}

/// Reads a file written by [`export_batch`] back into a batch.
pub fn import_batch(path: &Path) -> Result<GroupBatch, GrpoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records: Vec<ExportRecord> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|source| GrpoError::Json { line: i + 1, source })?);
    }
    records.sort_by_key(|r| r.index);
    let first = records
        .first()
        .ok_or_else(|| GrpoError::Misaligned("batch file has no records".into()))?;
    let mut batch = GroupBatch {
        question: first.question.clone(),
        golden_answers: first.golden_answers.clone(),
        trajectories: Vec::new(),
        rewards: Vec::new(),
        advantages: Vec::new(),
        masks: Vec::new(),
    };
    for r in records {
        if r.question != batch.question {
            return Err(GrpoError::Misaligned(format!("mixed questions in one batch: {:?}", r.question)));
        }
        batch.rewards.push(r.reward);
        batch.advantages.push(r.advantage);
        batch.masks.push(TokenMask { bits: r.mask });
        batch.trajectories.push(r.trajectory);
    }
    Ok(batch)
}
