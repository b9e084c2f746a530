//! Random distributions, policies and token batches for property checks.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::domain::{Group, Prompt, Rollout, TokenId, TokenStep};
use crate::objectives::{group_advantages, ClipConfig, TokenBatch};
use crate::policy::{shannon_entropy, ContextKey, PolicyTable};

/// Symmetric Dirichlet sample with concentration drawn log-uniformly from
/// `[0.01, 100]`, covering near one-hot through near uniform.
pub fn dirichlet<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Vec<f64> {
    let alpha = (rng.random_range(0.01f64.ln()..=100f64.ln())).exp();
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let draws: Vec<f64> = (0..size).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|x| x / total).collect();
        }
    }
}

/// A random policy and a batch of sampled-looking groups over it.
#[derive(Debug, Clone)]
pub struct RandomCase {
    pub policy: PolicyTable,
    pub groups: Vec<Group>,
    pub batch: TokenBatch,
}

#[derive(Debug, Clone, Copy)]
pub struct RandomCaseShape {
    pub vocab: (usize, usize),
    pub prompts: (usize, usize),
    pub group_size: usize,
    pub max_len: usize,
    pub logit_scale: f64,
}

impl Default for RandomCaseShape {
    fn default() -> Self {
        Self { vocab: (3, 12), prompts: (1, 3), group_size: 4, max_len: 6, logit_scale: 1.0 }
    }
}

/// Old probabilities are set from the current ones through a random ratio in
/// `[0.6, 1.5]`, kept at least `1e-3` away from every clip edge so central
/// differences never straddle a kink.
pub fn random_case<R: Rng + ?Sized>(rng: &mut R, shape: &RandomCaseShape) -> RandomCase {
    let vocab = rng.random_range(shape.vocab.0..=shape.vocab.1);
    let order = rng.random_range(1..=2);
    let mut policy = PolicyTable::new(vocab, order);
    let n_prompts = rng.random_range(shape.prompts.0..=shape.prompts.1);
    let clip = ClipConfig::default();
    let edges = [1.0 - clip.eps_low, 1.0 + clip.eps_high, 1.0 + clip.eps_low];

    let mut groups = Vec::with_capacity(n_prompts);
    for pi in 0..n_prompts {
        let prompt = Prompt::new(format!("r{pi}"), vec![0], vec![0]).expect("valid prompt");
        let mut trajectories = Vec::with_capacity(shape.group_size);
        for _ in 0..shape.group_size {
            let len = rng.random_range(1..=shape.max_len);
            let mut tokens: Vec<TokenId> = Vec::with_capacity(len);
            let mut steps = Vec::with_capacity(len);
            for _ in 0..len {
                let ctx = policy.context(&prompt.id, &tokens);
                if policy.logits(&ctx).iter().all(|&x| x == 0.0) {
                    let row = (0..vocab)
                        .map(|_| shape.logit_scale * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    policy.set_logits(ctx.clone(), row).expect("finite logits");
                }
                let p = policy.distribution(&ctx);
                let tok = rng.random_range(0..vocab);
                let ratio = loop {
                    let r: f64 = rng.random_range(0.6..1.5);
                    if r >= p[tok] && edges.iter().all(|e| (r - e).abs() > 1e-3) {
                        break r;
                    }
                };
                let old = p[tok] / ratio;
                let mut step = TokenStep::sampled(tok as TokenId, old, shannon_entropy(&p));
                step.cur_prob = p[tok];
                step.ratio = p[tok] / old;
                steps.push(step);
                tokens.push(tok as TokenId);
            }
            let reward = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            trajectories.push(Rollout { prompt_id: prompt.id.clone(), tokens, steps }.score(reward));
        }
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
        // Degenerate reward groups get a random +-1 advantage so every case
        // exercises the gradient.
        let adv = group_advantages(&rewards, 1e-6).expect("binary rewards");
        let (mean, std) = crate::domain::mean_and_population_std(&rewards);
        for (t, a) in trajectories.iter_mut().zip(adv) {
            t.advantage = if std < 1e-6 { if rng.random_bool(0.5) { 1.0 } else { -1.0 } } else { a };
        }
        groups.push(Group { prompt, trajectories, reward_mean: mean, reward_std: std });
    }
    let batch = TokenBatch::from_groups(&groups, order);
    RandomCase { policy, groups, batch }
}

/// Random keep-mask with roughly `drop` of the tokens masked, never all.
pub fn random_mask<R: Rng + ?Sized>(rng: &mut R, len: usize, drop: f64) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..len).map(|_| !rng.random_bool(drop)).collect();
    if !mask.iter().any(|&m| m) {
        let i = rng.random_range(0..len);
        mask[i] = true;
    }
    mask
}

/// Random logits on one context of a fresh table.
pub fn random_context<R: Rng + ?Sized>(rng: &mut R, vocab: usize, scale: f64) -> (PolicyTable, ContextKey) {
    let mut policy = PolicyTable::new(vocab, 1);
    let ctx = ContextKey::new("case", &[], 1);
    let row = (0..vocab).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    policy.set_logits(ctx.clone(), row).expect("finite logits");
    (policy, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dirichlet_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let v = rng.random_range(2..50);
            let p = dirichlet(&mut rng, v);
            assert_eq!(p.len(), v);
            assert!(p.iter().all(|&x| x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_case_groups_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let case = random_case(&mut rng, &RandomCaseShape::default());
            let n: usize = case.groups.iter().map(|g| g.token_count()).sum();
            assert_eq!(case.batch.len(), n);
            for r in case.batch.records() {
                assert!(r.old_prob > 0.0 && r.old_prob <= 1.0);
                assert!(r.advantage != 0.0);
            }
        }
    }
}
