//! Tabular autoregressive softmax policy.
//!
//! The policy conditions on the prompt id and the last `context_order`
//! generated tokens. Each context owns a logit vector over the vocabulary;
//! contexts never written to behave as zero logits (uniform).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Prompt, Rollout, SpecialTokens, TokenId, TokenStep};

pub const DEFAULT_PROB_FLOOR: f64 = 1e-8;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("non-finite gradient at context {context}")]
    NonFiniteGradient { context: String },
    #[error("gradient for context {context} has length {got}, vocabulary size is {expected}")]
    GradientShape { context: String, got: usize, expected: usize },
    #[error("invalid policy table: {0}")]
    Invalid(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint {path}: {message}")]
    Corrupt { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `"<prompt id>|<t1>-<t2>-..."` over the last `context_order` generated tokens.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextKey(String);

impl ContextKey {
    pub fn new(prompt_id: &str, history: &[TokenId], order: usize) -> Self {
        let tail = &history[history.len().saturating_sub(order)..];
        let joined = tail.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("-");
        ContextKey(format!("{prompt_id}|{joined}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Numerically stable softmax, then `max(p, floor)` and renormalization.
pub fn softmax_with_floor(logits: &[f64], floor: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&a| (a - max).exp()).collect();
    let z: f64 = p.iter().sum();
    for x in &mut p {
        *x /= z;
    }
    if floor > 0.0 && p.iter().any(|&x| x < floor) {
        for x in &mut p {
            *x = x.max(floor);
        }
        let z: f64 = p.iter().sum();
        for x in &mut p {
            *x /= z;
        }
    }
    p
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    context_order: usize,
    vocab_size: usize,
    prob_floor: f64,
    logits: BTreeMap<ContextKey, Vec<f64>>,
}

/// Outcome of one gradient application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    pub grad_norm: f64,
    pub scale: f64,
}

impl PolicyTable {
    pub fn new(vocab_size: usize, context_order: usize) -> Self {
        Self::with_floor(vocab_size, context_order, DEFAULT_PROB_FLOOR)
    }

    pub fn with_floor(vocab_size: usize, context_order: usize, prob_floor: f64) -> Self {
        assert!(vocab_size >= 2, "vocabulary must have at least 2 tokens");
        assert!(context_order >= 1, "context order must be at least 1");
        assert!((0.0..1.0 / vocab_size as f64).contains(&prob_floor), "prob_floor out of range");
        Self { context_order, vocab_size, prob_floor, logits: BTreeMap::new() }
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn prob_floor(&self) -> f64 {
        self.prob_floor
    }

    pub fn context(&self, prompt_id: &str, history: &[TokenId]) -> ContextKey {
        ContextKey::new(prompt_id, history, self.context_order)
    }

    pub fn contexts(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.logits.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self, ctx: &ContextKey) -> Vec<f64> {
        self.logits.get(ctx).cloned().unwrap_or_else(|| vec![0.0; self.vocab_size])
    }

    pub fn set_logits(&mut self, ctx: ContextKey, logits: Vec<f64>) -> Result<(), PolicyError> {
        if logits.len() != self.vocab_size {
            return Err(PolicyError::GradientShape {
                context: ctx.to_string(),
                got: logits.len(),
                expected: self.vocab_size,
            });
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::Invalid(format!("non-finite logit at {ctx}")));
        }
        self.logits.insert(ctx, logits);
        Ok(())
    }

    /// Adds `delta` to a single logit. Used by finite-difference probes.
    pub fn nudge_logit(&mut self, ctx: &ContextKey, index: usize, delta: f64) {
        let size = self.vocab_size;
        let row = self.logits.entry(ctx.clone()).or_insert_with(|| vec![0.0; size]);
        row[index] += delta;
    }

    pub fn distribution(&self, ctx: &ContextKey) -> Vec<f64> {
        match self.logits.get(ctx) {
            Some(a) => softmax_with_floor(a, self.prob_floor),
            None => vec![1.0 / self.vocab_size as f64; self.vocab_size],
        }
    }

    pub fn entropy(&self, ctx: &ContextKey) -> f64 {
        shannon_entropy(&self.distribution(ctx))
    }

    /// Samples a response autoregressively. Tokens are drawn from the
    /// tempered distribution; `old_prob` and `entropy` are recorded from the
    /// untempered one.
    pub fn sample_trajectory<R: Rng + ?Sized>(
        &self,
        prompt: &Prompt,
        special: SpecialTokens,
        max_len: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Rollout {
        assert!(max_len >= 1, "max_len must be at least 1");
        assert!(temperature > 0.0, "temperature must be positive");
        let mut tokens = Vec::new();
        let mut steps = Vec::new();
        while tokens.len() < max_len {
            let ctx = self.context(&prompt.id, &tokens);
            let probs = self.distribution(&ctx);
            let token = if temperature == 1.0 {
                sample_index(&probs, rng)
            } else {
                let tempered: Vec<f64> = probs.iter().map(|p| p.powf(1.0 / temperature)).collect();
                sample_index(&tempered, rng)
            };
            steps.push(TokenStep::sampled(token as TokenId, probs[token], shannon_entropy(&probs)));
            tokens.push(token as TokenId);
            if token as TokenId == special.end_of_sequence {
                break;
            }
        }
        Rollout { prompt_id: prompt.id.clone(), tokens, steps }
    }

    /// Frozen copy for use as the behaviour policy.
    pub fn snapshot(&self) -> PolicyTable {
        self.clone()
    }

    /// Gradient ascent: `logits += lr * scale * grad`, where `scale` shrinks
    /// the global 2-norm to `grad_clip_norm` when it is exceeded. Nothing is
    /// modified if any gradient entry is non-finite. All-zero rows are not
    /// materialized.
    pub fn apply_gradient(
        &mut self,
        grads: &BTreeMap<ContextKey, Vec<f64>>,
        learning_rate: f64,
        grad_clip_norm: f64,
    ) -> Result<UpdateReport, PolicyError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(PolicyError::LearningRate(learning_rate));
        }
        let mut sq = 0.0;
        for (ctx, g) in grads {
            if g.len() != self.vocab_size {
                return Err(PolicyError::GradientShape {
                    context: ctx.to_string(),
                    got: g.len(),
                    expected: self.vocab_size,
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(PolicyError::NonFiniteGradient { context: ctx.to_string() });
            }
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        let scale = if grad_norm > grad_clip_norm { grad_clip_norm / grad_norm } else { 1.0 };
        let step = learning_rate * scale;
        let size = self.vocab_size;
        for (ctx, g) in grads {
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let row = self.logits.entry(ctx.clone()).or_insert_with(|| vec![0.0; size]);
            for (a, d) in row.iter_mut().zip(g) {
                *a += step * d;
            }
        }
        Ok(UpdateReport { grad_norm, scale })
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            vocab_size: self.vocab_size,
            context_order: self.context_order,
            prob_floor: self.prob_floor,
            logits: self.logits.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, PolicyError> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Version { found: ck.version, expected: CHECKPOINT_VERSION });
        }
        if ck.vocab_size < 2 || ck.context_order < 1 {
            return Err(PolicyError::Invalid("vocab_size < 2 or context_order < 1".into()));
        }
        if !(ck.prob_floor >= 0.0 && ck.prob_floor < 1.0 / ck.vocab_size as f64) {
            return Err(PolicyError::Invalid(format!("prob_floor {} out of range", ck.prob_floor)));
        }
        let mut table = PolicyTable::with_floor(ck.vocab_size, ck.context_order, ck.prob_floor);
        for (ctx, row) in ck.logits {
            table.set_logits(ctx, row)?;
        }
        Ok(table)
    }
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// On-disk policy format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Completed training iterations when the checkpoint was taken.
    #[serde(default)]
    pub step: u64,
    pub vocab_size: usize,
    pub context_order: usize,
    pub prob_floor: f64,
    pub logits: BTreeMap<ContextKey, Vec<f64>>,
}

pub fn checkpoint(policy: &PolicyTable, step: u64, path: &Path) -> Result<(), PolicyError> {
    let json = serde_json::to_string(&policy.to_checkpoint(step))
        .map_err(|e| PolicyError::Invalid(e.to_string()))?;
    fs::write(path, json).map_err(|source| PolicyError::Io { path: path.display().to_string(), source })
}

/// Returns the policy and the step count stored alongside it.
pub fn restore(path: &Path) -> Result<(PolicyTable, u64), PolicyError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| PolicyError::Io { path: display.clone(), source })?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| PolicyError::Corrupt { path: display, message: e.to_string() })?;
    let step = ck.step;
    Ok((PolicyTable::from_checkpoint(ck)?, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(s: &str) -> ContextKey {
        ContextKey::new(s, &[], 1)
    }

    #[test]
    fn context_keys() {
        assert_eq!(ContextKey::new("p", &[], 2).as_str(), "p|");
        assert_eq!(ContextKey::new("p", &[4], 2).as_str(), "p|4");
        assert_eq!(ContextKey::new("p", &[1, 12, 3], 2).as_str(), "p|12-3");
    }

    #[test]
    fn uniform_and_closed_form_softmax() {
        let mut t = PolicyTable::new(4, 1);
        assert_eq!(t.distribution(&ctx("a")), vec![0.25; 4]);
        t.set_logits(ctx("a"), vec![2f64.ln(), 0.0, 0.0, 0.0]).unwrap();
        let p = t.distribution(&ctx("a"));
        for (x, e) in p.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn entropy_extremes() {
        let mut t = PolicyTable::new(4, 1);
        assert!((t.entropy(&ctx("a")) - 4f64.ln()).abs() < 1e-15);
        t.set_logits(ctx("a"), vec![60.0, 0.0, 0.0, 0.0]).unwrap();
        let h = t.entropy(&ctx("a"));
        assert!(h >= 0.0 && h < 1e-6, "{h}");
        let p = t.distribution(&ctx("a"));
        let bound = 1e-8 / (1.0 + 4.0 * 1e-8);
        assert!(p.iter().all(|&x| x >= bound));
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let p = softmax_with_floor(&[1e300, -1e300, 0.0], 1e-8);
        assert!(p.iter().all(|x| x.is_finite() && *x > 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forced_eos() {
        let mut t = PolicyTable::new(3, 1);
        let sp = SpecialTokens { answer_marker: 1, end_of_sequence: 2 };
        let prompt = Prompt::new("p", vec![0], vec![0]).unwrap();
        t.set_logits(ContextKey::new("p", &[], 1), vec![-50.0, -50.0, 50.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = t.sample_trajectory(&prompt, sp, 32, 1.0, &mut rng);
        assert_eq!(r.tokens, vec![2]);
        assert_eq!(r.steps.len(), 1);
    }

    #[test]
    fn sampling_is_deterministic_and_respects_max_len() {
        let t = PolicyTable::new(5, 2);
        let sp = SpecialTokens { answer_marker: 3, end_of_sequence: 4 };
        let prompt = Prompt::new("p", vec![0], vec![0]).unwrap();
        let a = t.sample_trajectory(&prompt, sp, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let b = t.sample_trajectory(&prompt, sp, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        for s in 0..50 {
            let r = t.sample_trajectory(&prompt, sp, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(s));
            assert!(!r.tokens.is_empty() && r.tokens.len() <= 6);
            for (k, step) in r.steps.iter().enumerate() {
                let hist = &r.tokens[..k];
                assert_eq!(step.old_prob, t.distribution(&t.context("p", hist))[step.token_id as usize]);
            }
        }
    }

    #[test]
    fn tempered_sampling_records_untempered_probability() {
        let mut t = PolicyTable::new(3, 1);
        let sp = SpecialTokens { answer_marker: 0, end_of_sequence: 2 };
        let prompt = Prompt::new("p", vec![0], vec![0]).unwrap();
        let c = ContextKey::new("p", &[], 1);
        t.set_logits(c.clone(), vec![1.0, 0.0, 3.0]).unwrap();
        let r = t.sample_trajectory(&prompt, sp, 1, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        let p = t.distribution(&c);
        assert_eq!(r.steps[0].old_prob, p[r.tokens[0] as usize]);
    }

    #[test]
    fn empirical_frequencies_match_exact_probabilities() {
        // 3-token policy; the first draw terminates only on eos so count first tokens.
        let mut t = PolicyTable::new(3, 1);
        let sp = SpecialTokens { answer_marker: 0, end_of_sequence: 2 };
        let prompt = Prompt::new("p", vec![0], vec![0]).unwrap();
        let c = ContextKey::new("p", &[], 1);
        t.set_logits(c.clone(), vec![0.3, -0.5, 0.9]).unwrap();
        let p = t.distribution(&c);
        let n = 10_000;
        let mut counts = [0usize; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..n {
            let r = t.sample_trajectory(&prompt, sp, 1, 1.0, &mut rng);
            counts[r.tokens[0] as usize] += 1;
        }
        for k in 0..3 {
            let mean = n as f64 * p[k];
            let sd = (n as f64 * p[k] * (1.0 - p[k])).sqrt();
            assert!((counts[k] as f64 - mean).abs() < 3.0 * sd, "token {k}: {} vs {mean}", counts[k]);
        }
    }

    #[test]
    fn snapshot_is_isolated() {
        let mut t = PolicyTable::new(4, 1);
        t.set_logits(ctx("a"), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let snap = t.snapshot();
        assert_eq!(snap.snapshot(), snap);
        let before = snap.distribution(&ctx("a"));
        let mut g = BTreeMap::new();
        g.insert(ctx("a"), vec![1.0, -1.0, 0.0, 0.0]);
        t.apply_gradient(&g, 0.5, 10.0).unwrap();
        assert_eq!(snap.distribution(&ctx("a")), before);
        assert_ne!(t.distribution(&ctx("a")), before);
    }

    #[test]
    fn gradient_clipping_and_identity() {
        let mut t = PolicyTable::new(4, 1);
        t.set_logits(ctx("a"), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let orig = t.clone();
        let mut zero = BTreeMap::new();
        zero.insert(ctx("a"), vec![0.0; 4]);
        zero.insert(ctx("b"), vec![0.0; 4]);
        t.apply_gradient(&zero, 0.1, 1.0).unwrap();
        assert_eq!(t, orig);

        let mut g = BTreeMap::new();
        g.insert(ctx("a"), vec![2.0, 0.0, 0.0, 0.0]);
        let rep = t.apply_gradient(&g, 1.0, 1.0).unwrap();
        assert_eq!(rep.grad_norm, 2.0);
        assert_eq!(rep.scale, 0.5);
        let applied: Vec<f64> = t.logits(&ctx("a")).iter().zip(orig.logits(&ctx("a"))).map(|(a, b)| a - b).collect();
        let norm = applied.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejected_without_change() {
        let mut t = PolicyTable::new(2, 1);
        let orig = t.clone();
        let mut g = BTreeMap::new();
        g.insert(ctx("a"), vec![1.0, -1.0]);
        g.insert(ctx("b"), vec![f64::NAN, 0.0]);
        assert!(matches!(t.apply_gradient(&g, 0.1, 1.0), Err(PolicyError::NonFiniteGradient { .. })));
        assert_eq!(t, orig);
        assert!(t.apply_gradient(&BTreeMap::new(), 0.0, 1.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut t = PolicyTable::new(5, 2);
        t.set_logits(ContextKey::new("p", &[1, 2], 2), vec![0.1, -1.0 / 3.0, 1e-17, 7.25, -3.5]).unwrap();
        checkpoint(&t, 12, &path).unwrap();
        let (back, step) = restore(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(step, 12);

        let text = fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":9");
        fs::write(&path, text).unwrap();
        assert!(matches!(restore(&path), Err(PolicyError::Version { found: 9, .. })));
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(restore(&path), Err(PolicyError::Corrupt { .. })));
        assert!(matches!(restore(&dir.path().join("missing.json")), Err(PolicyError::Io { .. })));
    }
}
