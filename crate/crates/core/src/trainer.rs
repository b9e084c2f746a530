//! Rollout, advantage, masking and update loop.
//!
//! Every random draw is derived from `(seed, step, slot)`, so a run is
//! reproducible regardless of the number of worker threads, and resuming from
//! a checkpoint taken after step `n` continues exactly as the uninterrupted
//! run would have.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::bounds::grad_norm_exact;
use crate::domain::{ClipState, Group, Prompt, SpecialTokens, TokenId, Vocabulary};
use crate::objectives::{
    evaluate_tokens, surrogate_gradient, ClipConfig, Objective, ObjectiveError, TokenBatch, DEFAULT_SIGMA_MIN,
};
use crate::policy::{ContextKey, PolicyError, PolicyTable, DEFAULT_PROB_FLOOR};
use crate::s2t::{classify_phase, s2t_keep, CellStats, S2TConfig, S2TError, Thresholds};
use crate::tasks::{verify, DEFAULT_MAX_RESPONSE_LEN};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no prompts to train on")]
    NoPrompts,
    #[error("prompt {id} uses token {token} outside the vocabulary")]
    PromptVocabulary { id: String, token: TokenId },
    #[error("policy vocabulary {policy} does not match task vocabulary {task}")]
    VocabularyMismatch { policy: usize, task: usize },
    #[error("step {step}: {source}")]
    Objective {
        step: u64,
        #[source]
        source: ObjectiveError,
    },
    #[error("step {step}: {source}")]
    Threshold {
        step: u64,
        #[source]
        source: S2TError,
    },
    /// The live policy is carried so a diagnostic checkpoint can be written.
    #[error("step {step}: {source}")]
    NonFinite {
        step: u64,
        policy: Box<PolicyTable>,
        #[source]
        source: PolicyError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub group_size: usize,
    pub batch_prompts: usize,
    pub mini_batches_per_step: usize,
    pub learning_rate: f64,
    /// The step size ramps linearly from `lr / warmup_steps` to `lr`.
    pub warmup_steps: u64,
    pub max_response_len: usize,
    pub clip: ClipConfig,
    pub s2t: S2TConfig,
    pub seed: u64,
    pub total_steps: u64,
    /// Global 2-norm the gradient is rescaled to when exceeded.
    pub grad_clip_norm: f64,
    pub sigma_min: f64,
    pub temperature: f64,
    pub context_order: usize,
    pub prob_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Stapo,
            group_size: 8,
            batch_prompts: 32,
            mini_batches_per_step: 4,
            learning_rate: 30.0,
            warmup_steps: 10,
            max_response_len: DEFAULT_MAX_RESPONSE_LEN,
            clip: ClipConfig::default(),
            s2t: S2TConfig::default(),
            seed: 0,
            total_steps: 500,
            grad_clip_norm: 1.0,
            sigma_min: DEFAULT_SIGMA_MIN,
            temperature: 1.0,
            context_order: 2,
            prob_floor: DEFAULT_PROB_FLOOR,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`]. Underscores and dashes are
/// interchangeable.
pub const CONFIG_KEYS: &[&str] = &[
    "objective",
    "group-size",
    "batch-prompts",
    "mini-batches",
    "lr",
    "warmup-steps",
    "max-len",
    "clip-low",
    "clip-high",
    "tau-p",
    "entropy-quantile",
    "seed",
    "steps",
    "grad-clip",
    "sigma-min",
    "temperature",
    "context-order",
    "prob-floor",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.group_size < 2 {
            return bad(format!("group size must be at least 2, got {}", self.group_size));
        }
        if self.batch_prompts == 0 || self.mini_batches_per_step == 0 {
            return bad("batch prompts and mini-batches must be positive".into());
        }
        if self.batch_prompts % self.mini_batches_per_step != 0 {
            return bad(format!(
                "batch prompts {} not divisible by mini-batches {}",
                self.batch_prompts, self.mini_batches_per_step
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.max_response_len == 0 {
            return bad("max response length must be positive".into());
        }
        self.clip.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.s2t.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("gradient clip norm must be positive, got {}", self.grad_clip_norm));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return bad(format!("sigma_min must be positive, got {}", self.sigma_min));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.context_order == 0 {
            return bad("context order must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.prob_floor) {
            return bad(format!("probability floor must be in [0,1), got {}", self.prob_floor));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value.trim().parse().map_err(|_| TrainError::Config(format!("{key}: cannot parse {value:?}")))
        }
        let key = key.trim().replace('_', "-");
        match key.as_str() {
            "objective" => {
                self.objective = value.trim().parse::<Objective>().map_err(|e| TrainError::Config(e.to_string()))?
            }
            "group-size" => self.group_size = num(&key, value)?,
            "batch-prompts" => self.batch_prompts = num(&key, value)?,
            "mini-batches" => self.mini_batches_per_step = num(&key, value)?,
            "lr" => self.learning_rate = num(&key, value)?,
            "warmup-steps" => self.warmup_steps = num(&key, value)?,
            "max-len" => self.max_response_len = num(&key, value)?,
            "clip-low" => self.clip.eps_low = num(&key, value)?,
            "clip-high" => self.clip.eps_high = num(&key, value)?,
            "tau-p" => self.s2t.tau_p = num(&key, value)?,
            "entropy-quantile" => self.s2t.entropy_quantile = num(&key, value)?,
            "seed" => self.seed = num(&key, value)?,
            "steps" => self.total_steps = num(&key, value)?,
            "grad-clip" => self.grad_clip_norm = num(&key, value)?,
            "sigma-min" => self.sigma_min = num(&key, value)?,
            "temperature" => self.temperature = num(&key, value)?,
            "context-order" => self.context_order = num(&key, value)?,
            "prob-floor" => self.prob_floor = num(&key, value)?,
            _ => return Err(TrainError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Step size used at 1-based `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "objective={} G={} prompts={} mini_batches={} lr={} warmup={} tau_p={} q={} seed={} steps={}",
            self.objective,
            self.group_size,
            self.batch_prompts,
            self.mini_batches_per_step,
            self.learning_rate,
            self.warmup_steps,
            self.s2t.tau_p,
            self.s2t.entropy_quantile,
            self.seed,
            self.total_steps
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_reward: f64,
    /// Token-averaged next-token entropy under the policy that sampled.
    pub mean_entropy: f64,
    pub spurious_ratio: f64,
    pub masked_count: usize,
    pub total_tokens: usize,
    /// Mean over mini-batches, evaluated before each update.
    pub surrogate_value: f64,
    /// Mean pre-clip global gradient norm over applied updates.
    pub grad_norm: f64,
    pub learning_rate: f64,
    pub skipped_updates: usize,
    /// Per phase cell, keyed by cell label.
    pub cells: BTreeMap<String, CellStats>,
}

/// One token as seen by the update that consumed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub mini_batch: usize,
    pub prompt_id: String,
    pub context: ContextKey,
    pub token: TokenId,
    pub old_prob: f64,
    pub cur_prob: f64,
    pub entropy: f64,
    pub advantage: f64,
    pub ratio: f64,
    pub clip_state: ClipState,
    pub mask: u8,
    pub tau_p: f64,
    pub tau_h: f64,
    /// Norm of the unnormalized per-token logit gradient.
    pub grad_norm: f64,
}

impl TraceRecord {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds { tau_p: self.tau_p, tau_h: self.tau_h }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub metrics: StepMetrics,
    /// Token id -> count among masked tokens of this step.
    pub masked_tokens: BTreeMap<TokenId, u64>,
    pub kept_tokens: BTreeMap<TokenId, u64>,
    /// Filled only when tracing is enabled.
    pub trace: Vec<TraceRecord>,
}

pub struct Trainer {
    config: TrainConfig,
    prompts: Vec<Prompt>,
    special: SpecialTokens,
    policy: PolicyTable,
    step: u64,
    trace: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig, prompts: Vec<Prompt>, vocab: &Vocabulary) -> Result<Self, TrainError> {
        let policy = PolicyTable::with_floor(vocab.size(), config.context_order, config.prob_floor);
        Self::resume(config, prompts, vocab, policy, 0)
    }

    /// Continues after `completed_steps` steps from `policy`.
    pub fn resume(
        config: TrainConfig,
        prompts: Vec<Prompt>,
        vocab: &Vocabulary,
        policy: PolicyTable,
        completed_steps: u64,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if prompts.is_empty() {
            return Err(TrainError::NoPrompts);
        }
        for p in &prompts {
            if let Some(&token) = p.tokens.iter().chain(&p.ground_truth).find(|&&t| !vocab.contains(t)) {
                return Err(TrainError::PromptVocabulary { id: p.id.clone(), token });
            }
        }
        if policy.vocab_size() != vocab.size() {
            return Err(TrainError::VocabularyMismatch { policy: policy.vocab_size(), task: vocab.size() });
        }
        if policy.context_order() != config.context_order {
            return Err(TrainError::Config(format!(
                "policy context order {} does not match config {}",
                policy.context_order(),
                config.context_order
            )));
        }
        Ok(Self { config, prompts, special: vocab.special(), policy, step: completed_steps, trace: false })
    }

    pub fn with_trace(mut self, on: bool) -> Self {
        self.trace = on;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn policy(&self) -> &PolicyTable {
        &self.policy
    }

    pub fn into_policy(self) -> PolicyTable {
        self.policy
    }

    pub fn completed_steps(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Prompts used at 1-based `step`: without replacement when the pool is
    /// large enough, with replacement otherwise.
    fn select_prompts(&self, step: u64) -> Vec<&Prompt> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, step, u64::MAX));
        let n = self.config.batch_prompts;
        if self.prompts.len() >= n {
            let mut idx = index::sample(&mut rng, self.prompts.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &self.prompts[i]).collect()
        } else {
            (0..n).map(|_| &self.prompts[rng.random_range(0..self.prompts.len())]).collect()
        }
    }

    /// Samples `group_size` responses per prompt from a frozen snapshot and
    /// scores them.
    pub fn rollout(&self, step: u64) -> Result<Vec<Group>, TrainError> {
        let cfg = &self.config;
        let behaviour = self.policy.snapshot();
        let special = self.special;
        let prompts = self.select_prompts(step);
        prompts
            .par_iter()
            .enumerate()
            .map(|(slot, prompt)| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, step, slot as u64));
                let trajectories = (0..cfg.group_size)
                    .map(|_| {
                        let r = behaviour.sample_trajectory(prompt, special, cfg.max_response_len, cfg.temperature, &mut rng);
                        let reward = verify(prompt, &r.tokens, special);
                        r.score(reward)
                    })
                    .collect();
                Group::new((*prompt).clone(), trajectories, cfg.sigma_min)
                    .map_err(|source| TrainError::Objective { step, source })
            })
            .collect()
    }

    /// Runs one full iteration: rollout, then one update per mini-batch.
    pub fn step(&mut self) -> Result<StepOutcome, TrainError> {
        let step = self.step + 1;
        let groups = self.rollout(step)?;
        let outcome = self.update(step, &groups)?;
        self.step = step;
        Ok(outcome)
    }

    /// Applies the mini-batch updates for already-scored `groups`.
    pub fn update(&mut self, step: u64, groups: &[Group]) -> Result<StepOutcome, TrainError> {
        let cfg = self.config;
        let lr = cfg.learning_rate_at(step);
        let per_mini = groups.len().div_ceil(cfg.mini_batches_per_step).max(1);

        let mut masked_tokens = BTreeMap::new();
        let mut kept_tokens = BTreeMap::new();
        let mut trace = Vec::new();
        let mut cell_rows = Vec::new();
        let mut masked_count = 0;
        let mut total_tokens = 0;
        let mut surrogate_sum = 0.0;
        let mut surrogate_n = 0usize;
        let mut grad_norm_sum = 0.0;
        let mut applied = 0usize;
        let mut skipped = 0usize;

        for (mb, chunk) in groups.chunks(per_mini).enumerate() {
            let batch = TokenBatch::from_groups(chunk, cfg.context_order);
            if batch.is_empty() {
                continue;
            }
            let evals = evaluate_tokens(&self.policy, cfg.objective, &batch, &cfg.clip);
            let entropies: Vec<f64> = evals.iter().map(|e| e.entropy).collect();
            let th = cfg.s2t.resolve(&entropies).map_err(|source| TrainError::Threshold { step, source })?;
            let mask: Vec<bool> = match cfg.objective {
                Objective::Stapo => batch
                    .records()
                    .iter()
                    .zip(&evals)
                    .map(|(r, e)| s2t_keep(e.cur_prob, e.entropy, r.advantage, &th))
                    .collect(),
                _ => vec![true; batch.len()],
            };

            let mut dists: BTreeMap<&ContextKey, Vec<f64>> = BTreeMap::new();
            for ((r, e), &keep) in batch.records().iter().zip(&evals).zip(&mask) {
                total_tokens += 1;
                let freq = if keep { &mut kept_tokens } else { &mut masked_tokens };
                *freq.entry(r.token).or_insert(0u64) += 1;
                if !keep {
                    masked_count += 1;
                }
                let pi = dists.entry(&r.context).or_insert_with(|| self.policy.distribution(&r.context));
                let norm = grad_norm_exact(e.weight, pi, r.token as usize).sqrt();
                cell_rows.push((classify_phase(e.cur_prob, e.entropy, r.advantage, &th), norm, e.entropy));
                if self.trace {
                    trace.push(TraceRecord {
                        step,
                        mini_batch: mb,
                        prompt_id: prompt_of(&r.context).to_string(),
                        context: r.context.clone(),
                        token: r.token,
                        old_prob: r.old_prob,
                        cur_prob: e.cur_prob,
                        entropy: e.entropy,
                        advantage: r.advantage,
                        ratio: e.ratio,
                        clip_state: e.clip_state,
                        mask: keep as u8,
                        tau_p: th.tau_p,
                        tau_h: th.tau_h,
                        grad_norm: norm,
                    });
                }
            }

            match surrogate_gradient(&self.policy, cfg.objective, &batch, &mask, &cfg.clip) {
                Err(ObjectiveError::AllMasked) => {
                    log::info!("step {step} mini-batch {mb}: every token masked, update skipped");
                    skipped += 1;
                }
                Err(source) => return Err(TrainError::Objective { step, source }),
                Ok(g) => {
                    surrogate_sum += g.value;
                    surrogate_n += 1;
                    let report = match self.policy.apply_gradient(&g.grads, lr, cfg.grad_clip_norm) {
                        Ok(r) => r,
                        Err(source @ PolicyError::NonFiniteGradient { .. }) => {
                            return Err(TrainError::NonFinite { step, policy: Box::new(self.policy.clone()), source })
                        }
                        Err(e) => return Err(TrainError::Config(e.to_string())),
                    };
                    grad_norm_sum += report.grad_norm;
                    applied += 1;
                }
            }
        }

        let (reward_sum, n_traj) = groups
            .iter()
            .flat_map(|g| &g.trajectories)
            .fold((0.0, 0usize), |(s, n), t| (s + t.reward, n + 1));
        let (entropy_sum, n_steps) = groups
            .iter()
            .flat_map(|g| &g.trajectories)
            .flat_map(|t| &t.steps)
            .fold((0.0, 0usize), |(s, n), st| (s + st.entropy, n + 1));
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };

        let metrics = StepMetrics {
            step,
            mean_reward: mean(reward_sum, n_traj),
            mean_entropy: mean(entropy_sum, n_steps),
            spurious_ratio: mean(masked_count as f64, total_tokens),
            masked_count,
            total_tokens,
            surrogate_value: mean(surrogate_sum, surrogate_n),
            grad_norm: mean(grad_norm_sum, applied),
            learning_rate: lr,
            skipped_updates: skipped,
            cells: crate::s2t::cell_statistics(cell_rows).into_iter().map(|(c, s)| (c.label(), s)).collect(),
        };
        Ok(StepOutcome { metrics, masked_tokens, kept_tokens, trace })
    }

    /// Runs until `total_steps`, handing every outcome to `sink`.
    pub fn run<F>(&mut self, mut sink: F) -> Result<(), TrainError>
    where
        F: FnMut(&StepOutcome),
    {
        while !self.is_done() {
            let out = self.step()?;
            log::debug!(
                "step {} reward {:.4} entropy {:.4} masked {}/{}",
                out.metrics.step,
                out.metrics.mean_reward,
                out.metrics.mean_entropy,
                out.metrics.masked_count,
                out.metrics.total_tokens
            );
            sink(&out);
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final policy with every step's metrics.
pub fn train(
    config: TrainConfig,
    prompts: Vec<Prompt>,
    vocab: &Vocabulary,
) -> Result<(PolicyTable, Vec<StepMetrics>), TrainError> {
    let mut trainer = Trainer::new(config, prompts, vocab)?;
    let mut metrics = Vec::with_capacity(config.total_steps as usize);
    trainer.run(|o| metrics.push(o.metrics.clone()))?;
    Ok((trainer.into_policy(), metrics))
}

/// Writes `token_id,frequency` rows with a header, in token order.
pub fn write_token_frequencies<W: std::io::Write>(
    mut out: W,
    freq: &BTreeMap<TokenId, u64>,
) -> std::io::Result<()> {
    writeln!(out, "token_id,frequency")?;
    for (tok, n) in freq {
        writeln!(out, "{tok},{n}")?;
    }
    Ok(())
}

/// Reads the format written by [`write_token_frequencies`].
pub fn read_token_frequencies<R: std::io::BufRead>(input: R) -> Result<BTreeMap<TokenId, u64>, String> {
    let mut freq = BTreeMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let (tok, n) = line.split_once(',').ok_or_else(|| format!("line {}: expected two columns", i + 1))?;
        let tok: TokenId = tok.trim().parse().map_err(|_| format!("line {}: bad token id", i + 1))?;
        let n: u64 = n.trim().parse().map_err(|_| format!("line {}: bad frequency", i + 1))?;
        *freq.entry(tok).or_insert(0) += n;
    }
    Ok(freq)
}

/// Adds `other` into `acc`.
pub fn merge_frequencies(acc: &mut BTreeMap<TokenId, u64>, other: &BTreeMap<TokenId, u64>) {
    for (&tok, &n) in other {
        *acc.entry(tok).or_insert(0) += n;
    }
}

fn prompt_of(ctx: &ContextKey) -> &str {
    ctx.as_str().split('|').next().unwrap_or_default()
}

/// SplitMix64 finalizer over the three coordinates.
fn mix(seed: u64, step: u64, slot: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(slot.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::ArithmeticTask;

    fn small() -> (TrainConfig, Vec<Prompt>, Vocabulary) {
        let task: ArithmeticTask = "mod:5:2".parse().unwrap();
        let cfg = TrainConfig { batch_prompts: 8, mini_batches_per_step: 2, total_steps: 3, ..Default::default() };
        (cfg, task.generate_prompts(20, 1), task.vocabulary())
    }

    #[test]
    fn warmup_is_linear() {
        let cfg = TrainConfig { learning_rate: 0.5, warmup_steps: 10, ..Default::default() };
        assert_eq!(cfg.learning_rate_at(1), 0.05);
        assert_eq!(cfg.learning_rate_at(5), 0.25);
        assert_eq!(cfg.learning_rate_at(10), 0.5);
        assert_eq!(cfg.learning_rate_at(400), 0.5);
        let none = TrainConfig { warmup_steps: 0, ..cfg };
        assert_eq!(none.learning_rate_at(1), 0.5);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.batch_prompts = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.set("clip-low", "1.0").unwrap();
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().set("bogus", "1").is_err());
        assert!(TrainConfig::default().set("lr", "fast").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        for key in CONFIG_KEYS {
            let value = match *key {
                "objective" => "dapo",
                _ => "3",
            };
            TrainConfig::default().set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
        let mut cfg = TrainConfig::default();
        cfg.set("tau_p", "0.01").unwrap();
        assert_eq!(cfg.s2t.tau_p, 0.01);
    }

    #[test]
    fn first_mini_batch_ratios_are_one() {
        let (cfg, prompts, vocab) = small();
        let mut t = Trainer::new(cfg, prompts, &vocab).unwrap().with_trace(true);
        let out = t.step().unwrap();
        for r in out.trace.iter().filter(|r| r.mini_batch == 0) {
            assert_eq!(r.ratio, 1.0);
        }
    }

    #[test]
    fn ratio_identity_holds() {
        let (cfg, prompts, vocab) = small();
        let mut t = Trainer::new(cfg, prompts, &vocab).unwrap().with_trace(true);
        for _ in 0..3 {
            let out = t.step().unwrap();
            assert_eq!(out.trace.len(), out.metrics.total_tokens);
            for r in &out.trace {
                assert_eq!(r.ratio, r.cur_prob / r.old_prob);
            }
        }
    }

    #[test]
    fn token_frequency_csv_round_trip() {
        let freq: BTreeMap<TokenId, u64> = [(0, 3), (7, 12), (9, 1)].into();
        let mut buf = Vec::new();
        write_token_frequencies(&mut buf, &freq).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "token_id,frequency\n0,3\n7,12\n9,1\n");
        assert_eq!(read_token_frequencies(&buf[..]).unwrap(), freq);
        assert!(read_token_frequencies(&b"token_id,frequency\nx,1\n"[..]).is_err());
    }

    #[test]
    fn mix_separates_coordinates() {
        assert_ne!(mix(0, 1, 2), mix(0, 2, 1));
        assert_ne!(mix(1, 0, 0), mix(0, 1, 0));
    }
}
