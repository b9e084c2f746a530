//! Group-normalized advantages and the clipped surrogate objectives.
//!
//! All three objectives share the per-token term
//! `min(rho * A, clip(rho, 1 - eps_low, 1 + eps_high) * A)` and differ only in
//! the normalizer:
//!
//! * GRPO: mean over sequences of the per-sequence token mean, symmetric clip.
//! * DAPO: mean over every token in the mini-batch.
//! * STAPO: mean over the tokens the S2T mask keeps; masked tokens vanish.
//!
//! The gradient w.r.t. the logits of a token's context is
//! `normalizer * w * (one_hot(y) - pi)` with `w = rho * A` on the unclipped
//! branch and `w = 0` when the clip is active.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{is_binary_reward, mean_and_population_std, ClipState, Group, TokenId};
use crate::policy::{shannon_entropy, ContextKey, PolicyTable};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("group advantages need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("reward {0} not in {{-1,+1}}")]
    InvalidReward(f64),
    #[error("every token in the batch is masked; no update")]
    AllMasked,
    #[error("mask has {got} entries for {expected} tokens")]
    MaskLength { got: usize, expected: usize },
    #[error("{0} does not accept a token mask")]
    MaskNotAllowed(Objective),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid clip config: {0}")]
    Clip(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Grpo,
    Dapo,
    Stapo,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Grpo, Objective::Dapo, Objective::Stapo];
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Grpo => "grpo",
            Objective::Dapo => "dapo",
            Objective::Stapo => "stapo",
        })
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "grpo" => Ok(Objective::Grpo),
            "dapo" => Ok(Objective::Dapo),
            "stapo" => Ok(Objective::Stapo),
            other => Err(format!("unknown objective {other:?} (expected grpo, dapo or stapo)")),
        }
    }
}

/// Asymmetric clip range `[1 - eps_low, 1 + eps_high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { eps_low: 0.2, eps_high: 0.28 }
    }
}

impl ClipConfig {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self, ObjectiveError> {
        let c = Self { eps_low, eps_high };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            return Err(ObjectiveError::Clip(format!("eps_low {} not in (0,1)", self.eps_low)));
        }
        if !(self.eps_high > 0.0 && self.eps_high.is_finite()) {
            return Err(ObjectiveError::Clip(format!("eps_high {} not positive", self.eps_high)));
        }
        Ok(())
    }

    /// GRPO uses the single symmetric epsilon `eps_low`.
    pub fn for_objective(&self, objective: Objective) -> ClipConfig {
        match objective {
            Objective::Grpo => ClipConfig { eps_low: self.eps_low, eps_high: self.eps_low },
            Objective::Dapo | Objective::Stapo => *self,
        }
    }
}

/// `(R_i - mean) / std` with the population std; all zeros when
/// `std < sigma_min`.
pub fn group_advantages(rewards: &[f64], sigma_min: f64) -> Result<Vec<f64>, ObjectiveError> {
    if rewards.len() < 2 {
        return Err(ObjectiveError::GroupTooSmall(rewards.len()));
    }
    if let Some(&r) = rewards.iter().find(|&&r| !is_binary_reward(r)) {
        return Err(ObjectiveError::InvalidReward(r));
    }
    let (mean, std) = mean_and_population_std(rewards);
    if std < sigma_min {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub fn token_ratio_and_clipstate(
    old_prob: f64,
    cur_prob: f64,
    advantage: f64,
    clip: &ClipConfig,
) -> (f64, ClipState) {
    let ratio = cur_prob / old_prob;
    let state = if advantage > 0.0 && ratio > 1.0 + clip.eps_high {
        ClipState::ClippedHigh
    } else if advantage < 0.0 && ratio < 1.0 - clip.eps_low {
        ClipState::ClippedLow
    } else {
        ClipState::Unclipped
    };
    (ratio, state)
}

/// `min(rho * A, clip(rho, 1 - eps_low, 1 + eps_high) * A)`
pub fn clipped_term(ratio: f64, advantage: f64, clip: &ClipConfig) -> f64 {
    let clipped = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// One sampled token with everything the objective needs, including the
/// context it was generated in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub context: ContextKey,
    pub token: TokenId,
    pub old_prob: f64,
    pub advantage: f64,
    /// Index of the owning sequence within the batch.
    pub sequence: usize,
}

/// Flattened mini-batch of tokens in fixed (group, trajectory, position)
/// order. Reductions follow this order, so results are bit-reproducible.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenBatch {
    records: Vec<TokenRecord>,
    seq_lens: Vec<usize>,
}

impl TokenBatch {
    pub fn from_groups(groups: &[Group], context_order: usize) -> Self {
        let mut records = Vec::new();
        let mut sequence = 0;
        for g in groups {
            for traj in &g.trajectories {
                for (t, step) in traj.steps.iter().enumerate() {
                    records.push(TokenRecord {
                        context: ContextKey::new(&traj.prompt_id, &traj.tokens[..t], context_order),
                        token: step.token_id,
                        old_prob: step.old_prob,
                        advantage: traj.advantage,
                        sequence,
                    });
                }
                sequence += 1;
            }
        }
        Self::from_records(records)
    }

    pub fn from_records(records: Vec<TokenRecord>) -> Self {
        let n_seq = records.iter().map(|r| r.sequence + 1).max().unwrap_or(0);
        let mut seq_lens = vec![0; n_seq];
        for r in &records {
            seq_lens[r.sequence] += 1;
        }
        Self { records, seq_lens }
    }

    pub fn records(&self) -> &[TokenRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Keeps only records whose `keep` flag is set.
    pub fn retain_by(&self, keep: &[bool]) -> TokenBatch {
        assert_eq!(keep.len(), self.records.len());
        let records = self.records.iter().zip(keep).filter(|(_, &k)| k).map(|(r, _)| r.clone()).collect();
        Self::from_records(records)
    }

    fn nonempty_sequences(&self) -> usize {
        self.seq_lens.iter().filter(|&&l| l > 0).count()
    }
}

/// Current-policy view of one token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenEval {
    pub cur_prob: f64,
    pub entropy: f64,
    pub ratio: f64,
    pub clip_state: ClipState,
    /// `rho * A` on the unclipped branch, 0 when clipped out.
    pub weight: f64,
}

struct DistributionCache<'a> {
    policy: &'a PolicyTable,
    cache: BTreeMap<&'a ContextKey, (Vec<f64>, f64)>,
}

impl<'a> DistributionCache<'a> {
    fn new(policy: &'a PolicyTable) -> Self {
        Self { policy, cache: BTreeMap::new() }
    }

    fn get(&mut self, ctx: &'a ContextKey) -> &(Vec<f64>, f64) {
        let policy = self.policy;
        self.cache.entry(ctx).or_insert_with(|| {
            let p = policy.distribution(ctx);
            let h = shannon_entropy(&p);
            (p, h)
        })
    }
}

pub fn evaluate_tokens(
    policy: &PolicyTable,
    objective: Objective,
    batch: &TokenBatch,
    clip: &ClipConfig,
) -> Vec<TokenEval> {
    let clip = clip.for_objective(objective);
    let mut cache = DistributionCache::new(policy);
    batch
        .records
        .iter()
        .map(|r| {
            let (p, h) = cache.get(&r.context);
            let cur_prob = p[r.token as usize];
            let (ratio, clip_state) = token_ratio_and_clipstate(r.old_prob, cur_prob, r.advantage, &clip);
            let weight = match clip_state {
                ClipState::Unclipped => ratio * r.advantage,
                _ => 0.0,
            };
            TokenEval { cur_prob, entropy: *h, ratio, clip_state, weight }
        })
        .collect()
}

fn check_mask(objective: Objective, batch: &TokenBatch, mask: &[bool]) -> Result<usize, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if mask.len() != batch.len() {
        return Err(ObjectiveError::MaskLength { got: mask.len(), expected: batch.len() });
    }
    let kept = mask.iter().filter(|&&m| m).count();
    if objective != Objective::Stapo && kept != mask.len() {
        return Err(ObjectiveError::MaskNotAllowed(objective));
    }
    if kept == 0 {
        return Err(ObjectiveError::AllMasked);
    }
    Ok(kept)
}

/// Per-record normalizer, or `None` for masked records.
fn normalizers(objective: Objective, batch: &TokenBatch, mask: &[bool], kept: usize) -> Vec<Option<f64>> {
    match objective {
        Objective::Grpo => {
            let n_seq = batch.nonempty_sequences() as f64;
            batch
                .records
                .iter()
                .map(|r| Some(1.0 / (n_seq * batch.seq_lens[r.sequence] as f64)))
                .collect()
        }
        Objective::Dapo => vec![Some(1.0 / batch.len() as f64); batch.len()],
        Objective::Stapo => {
            let z = 1.0 / kept as f64;
            mask.iter().map(|&m| m.then_some(z)).collect()
        }
    }
}

pub fn surrogate_value(
    policy: &PolicyTable,
    objective: Objective,
    batch: &TokenBatch,
    mask: &[bool],
    clip: &ClipConfig,
) -> Result<f64, ObjectiveError> {
    let kept = check_mask(objective, batch, mask)?;
    let norms = normalizers(objective, batch, mask, kept);
    let clip = clip.for_objective(objective);
    let mut cache = DistributionCache::new(policy);
    let mut total = 0.0;
    for (r, norm) in batch.records.iter().zip(norms) {
        let Some(norm) = norm else { continue };
        let cur = cache.get(&r.context).0[r.token as usize];
        total += norm * clipped_term(cur / r.old_prob, r.advantage, &clip);
    }
    Ok(total)
}

/// Unnormalized per-token gradient `w * (one_hot(target) - pi)` for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGradient {
    pub context: ContextKey,
    pub weight: f64,
    pub target: TokenId,
    pub clip_state: ClipState,
    pub vector: Vec<f64>,
}

impl TokenGradient {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateGradient {
    pub value: f64,
    pub grads: BTreeMap<ContextKey, Vec<f64>>,
    /// One entry per kept token, in batch order.
    pub tokens: Vec<TokenGradient>,
    pub evals: Vec<TokenEval>,
}

impl SurrogateGradient {
    pub fn global_norm(&self) -> f64 {
        self.grads.values().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Closed-form gradient of [`surrogate_value`] w.r.t. every touched logit.
/// Masked tokens and zero-weight tokens add nothing to `grads`.
pub fn surrogate_gradient(
    policy: &PolicyTable,
    objective: Objective,
    batch: &TokenBatch,
    mask: &[bool],
    clip: &ClipConfig,
) -> Result<SurrogateGradient, ObjectiveError> {
    let kept = check_mask(objective, batch, mask)?;
    let norms = normalizers(objective, batch, mask, kept);
    let evals = evaluate_tokens(policy, objective, batch, clip);
    let clip = clip.for_objective(objective);
    let mut cache = DistributionCache::new(policy);
    let mut grads: BTreeMap<ContextKey, Vec<f64>> = BTreeMap::new();
    let mut tokens = Vec::with_capacity(kept);
    let mut value = 0.0;
    for ((r, norm), ev) in batch.records.iter().zip(norms).zip(&evals) {
        let Some(norm) = norm else { continue };
        value += norm * clipped_term(ev.ratio, r.advantage, &clip);
        let pi = &cache.get(&r.context).0;
        let k = r.token as usize;
        let vector: Vec<f64> = pi
            .iter()
            .enumerate()
            .map(|(n, &p)| ev.weight * (if n == k { 1.0 } else { 0.0 } - p))
            .collect();
        if ev.weight != 0.0 {
            let coef = norm * ev.weight;
            let acc = grads.entry(r.context.clone()).or_insert_with(|| vec![0.0; pi.len()]);
            for (n, (a, &p)) in acc.iter_mut().zip(pi).enumerate() {
                *a += coef * (if n == k { 1.0 } else { 0.0 } - p);
            }
        }
        tokens.push(TokenGradient {
            context: r.context.clone(),
            weight: ev.weight,
            target: r.token,
            clip_state: ev.clip_state,
            vector,
        });
    }
    Ok(SurrogateGradient { value, grads, tokens, evals })
}
