//! Shared domain types: vocabulary, prompts, sampled trajectories and
//! reward groups, plus the per-token statistical record.
//!
//! Everything here is plain data. Types are immutable once built and can be
//! shared across rollout workers freely.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

/// Relative tolerance for `ratio == cur_prob / old_prob`.
const RATIO_TOLERANCE: f64 = 1e-12;
/// Absolute tolerance used when re-deriving group statistics.
const ADVANTAGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("vocabulary needs at least 2 tokens, got {0}")]
    VocabularyTooSmall(usize),
    #[error("special token {name} = {id} out of range for vocabulary of size {size}")]
    SpecialOutOfRange { name: &'static str, id: TokenId, size: usize },
    #[error("answer marker and end-of-sequence must differ (both {0})")]
    SpecialCollision(TokenId),
    #[error("prompt {0:?}: {1}")]
    InvalidPrompt(String, String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub answer_marker: TokenId,
    pub end_of_sequence: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    tokens: Vec<String>,
    special: SpecialTokens,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, special: SpecialTokens) -> Result<Self, DomainError> {
        let size = tokens.len();
        if size < 2 {
            return Err(DomainError::VocabularyTooSmall(size));
        }
        for (name, id) in [
            ("answer_marker", special.answer_marker),
            ("end_of_sequence", special.end_of_sequence),
        ] {
            if id as usize >= size {
                return Err(DomainError::SpecialOutOfRange { name, id, size });
            }
        }
        if special.answer_marker == special.end_of_sequence {
            return Err(DomainError::SpecialCollision(special.answer_marker));
        }
        Ok(Self { size, tokens, special })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    pub fn label(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, label: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == label).map(|i| i as TokenId)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.size
    }

    /// Human-readable rendering of a token sequence.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.label(id).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub ground_truth: Vec<TokenId>,
}

impl Prompt {
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<TokenId>,
        ground_truth: Vec<TokenId>,
    ) -> Result<Self, DomainError> {
        let prompt = Self { id: id.into(), tokens, ground_truth };
        prompt.validate()?;
        Ok(prompt)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let fail = |reason: &str| Err(DomainError::InvalidPrompt(self.id.clone(), reason.into()));
        if self.id.is_empty() {
            return fail("empty id");
        }
        // '|' separates the prompt id from the token history in context keys.
        if self.id.contains('|') {
            return fail("id must not contain '|'");
        }
        if self.tokens.is_empty() {
            return fail("empty tokens");
        }
        if self.ground_truth.is_empty() {
            return fail("empty ground_truth");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipState {
    Unclipped,
    ClippedHigh,
    ClippedLow,
}

/// Per-token record: behaviour and current probability of the sampled token,
/// entropy of the full next-token distribution (nats), the importance ratio,
/// the S2T keep flag and the clip branch taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    pub token_id: TokenId,
    pub old_prob: f64,
    pub cur_prob: f64,
    pub entropy: f64,
    pub ratio: f64,
    pub mask: u8,
    pub clip_state: ClipState,
}

impl TokenStep {
    /// A freshly sampled token: the current policy is the behaviour policy.
    pub fn sampled(token_id: TokenId, prob: f64, entropy: f64) -> Self {
        Self {
            token_id,
            old_prob: prob,
            cur_prob: prob,
            entropy,
            ratio: 1.0,
            mask: 1,
            clip_state: ClipState::Unclipped,
        }
    }

    fn violations(&self, vocab_size: Option<usize>) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.old_prob > 0.0 && self.old_prob <= 1.0) {
            out.push(format!("old_prob {} not in (0,1]", self.old_prob));
        }
        if !(self.cur_prob > 0.0 && self.cur_prob <= 1.0) {
            out.push(format!("cur_prob {} not in (0,1]", self.cur_prob));
        }
        if self.old_prob > 0.0 {
            let expected = self.cur_prob / self.old_prob;
            if !((self.ratio - expected).abs() <= RATIO_TOLERANCE * expected.abs()) {
                out.push(format!("ratio {} != cur/old {}", self.ratio, expected));
            }
        }
        if !(self.entropy >= 0.0) {
            out.push(format!("entropy {} negative", self.entropy));
        }
        if let Some(size) = vocab_size {
            if self.entropy > (size as f64).ln() + 1e-12 {
                out.push(format!("entropy {} exceeds ln|V|", self.entropy));
            }
            if self.token_id as usize >= size {
                out.push(format!("token {} outside vocabulary", self.token_id));
            }
        }
        if self.mask > 1 {
            out.push(format!("mask {} not in {{0,1}}", self.mask));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: String,
    pub tokens: Vec<TokenId>,
    pub steps: Vec<TokenStep>,
    pub reward: f64,
    pub advantage: f64,
}

/// A sampled response before the verifier has scored it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt_id: String,
    pub tokens: Vec<TokenId>,
    pub steps: Vec<TokenStep>,
}

impl Rollout {
    /// Attach a verifier reward; the advantage is filled in by [`Group::new`].
    pub fn score(self, reward: f64) -> Trajectory {
        Trajectory {
            prompt_id: self.prompt_id,
            tokens: self.tokens,
            steps: self.steps,
            reward,
            advantage: 0.0,
        }
    }
}

pub fn is_binary_reward(r: f64) -> bool {
    r == 1.0 || r == -1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt: Prompt,
    pub trajectories: Vec<Trajectory>,
    pub reward_mean: f64,
    pub reward_std: f64,
}

impl Group {
    /// Builds a group and writes the group-normalized advantage into each
    /// trajectory.
    pub fn new(
        prompt: Prompt,
        mut trajectories: Vec<Trajectory>,
        sigma_min: f64,
    ) -> Result<Self, crate::objectives::ObjectiveError> {
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
        let advantages = crate::objectives::group_advantages(&rewards, sigma_min)?;
        let (reward_mean, reward_std) = mean_and_population_std(&rewards);
        for (traj, adv) in trajectories.iter_mut().zip(advantages) {
            traj.advantage = adv;
        }
        Ok(Self { prompt, trajectories, reward_mean, reward_std })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.tokens.len()).sum()
    }
}

pub(crate) fn mean_and_population_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Parameters a group is checked against.
#[derive(Debug, Clone, Copy)]
pub struct GroupExpectations {
    pub group_size: usize,
    pub sigma_min: f64,
    pub vocab_size: Option<usize>,
}

impl Default for GroupExpectations {
    fn default() -> Self {
        Self { group_size: 8, sigma_min: crate::objectives::DEFAULT_SIGMA_MIN, vocab_size: None }
    }
}

/// Lists every broken Group/Trajectory/TokenStep invariant. Empty means valid.
pub fn validate_group(group: &Group, expect: &GroupExpectations) -> Vec<String> {
    let mut out = Vec::new();
    if group.trajectories.len() != expect.group_size {
        out.push(format!(
            "group has {} trajectories, expected {}",
            group.trajectories.len(),
            expect.group_size
        ));
    }
    if let Err(e) = group.prompt.validate() {
        out.push(e.to_string());
    }
    for (i, traj) in group.trajectories.iter().enumerate() {
        if traj.prompt_id != group.prompt.id {
            out.push(format!(
                "trajectory {i}: prompt_id {:?} does not match group prompt {:?}",
                traj.prompt_id, group.prompt.id
            ));
        }
        if traj.tokens.is_empty() {
            out.push(format!("trajectory {i}: empty token sequence"));
        }
        if traj.steps.len() != traj.tokens.len() {
            out.push(format!(
                "trajectory {i}: {} steps for {} tokens",
                traj.steps.len(),
                traj.tokens.len()
            ));
        }
        if !is_binary_reward(traj.reward) {
            out.push(format!("trajectory {i}: reward not in {{-1,+1}} (got {})", traj.reward));
        }
        for (t, (step, &tok)) in traj.steps.iter().zip(&traj.tokens).enumerate() {
            if step.token_id != tok {
                out.push(format!("trajectory {i} step {t}: token_id {} != token {tok}", step.token_id));
            }
            for v in step.violations(expect.vocab_size) {
                out.push(format!("trajectory {i} step {t}: {v}"));
            }
        }
    }

    if group.trajectories.is_empty() {
        return out;
    }
    let rewards: Vec<f64> = group.trajectories.iter().map(|t| t.reward).collect();
    let (mean, std) = mean_and_population_std(&rewards);
    if !((group.reward_mean - mean).abs() <= ADVANTAGE_TOLERANCE) {
        out.push(format!("reward_mean {} != {mean}", group.reward_mean));
    }
    if !(group.reward_std >= 0.0) || !((group.reward_std - std).abs() <= ADVANTAGE_TOLERANCE) {
        out.push(format!("reward_std {} != {std}", group.reward_std));
    }
    for (i, traj) in group.trajectories.iter().enumerate() {
        let expected = if std > expect.sigma_min { (traj.reward - mean) / std } else { 0.0 };
        if !((traj.advantage - expected).abs() <= ADVANTAGE_TOLERANCE) {
            out.push(format!(
                "trajectory {i}: advantage {} != group-normalized {expected}",
                traj.advantage
            ));
        }
    }
    out
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, items: &[T]) -> Result<(), DomainError> {
    for item in items {
        serde_json::to_writer(&mut writer, item)
            .map_err(|source| DomainError::Json { line: 0, source })?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads one JSON object per non-blank line; errors carry 1-based line numbers.
pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(reader: R) -> Result<Vec<T>, DomainError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|source| DomainError::Json { line: idx + 1, source })?;
        out.push(item);
    }
    Ok(out)
}
