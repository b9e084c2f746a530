//! The full numerical verification suite behind `stapo verify`.
//!
//! Every check reports how many cases it ran, how many failed, and the worst
//! margin seen (positive means slack, negative means a violation).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bounds::{grad_norm_bounds, grad_norm_exact};
use super::dynamics::{log_log_slope, measure_entropy_change, predict_entropy_change, Visit};
use super::gradcheck::finite_difference_check;
use super::random::{dirichlet, random_case, random_context, random_mask, RandomCaseShape};
use crate::domain::ClipState;
use crate::objectives::{surrogate_gradient, ClipConfig, Objective, TokenBatch, TokenRecord};
use crate::policy::{shannon_entropy, ContextKey, PolicyTable};
use crate::s2t::{classify_phase, s2t_keep, Thresholds};

pub const DECOMPOSITION_REL_TOL: f64 = 1e-12;
pub const SANDWICH_SLACK: f64 = 1e-9;
pub const ENTROPY_INEQ_SLACK: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-6;
pub const ENTROPY_CHANGE_ETAS: [f64; 4] = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
pub const ENTROPY_CHANGE_SLOPE: (f64, f64) = (1.7, 2.3);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_name: String,
    pub cases: usize,
    pub failures: usize,
    pub worst_margin: f64,
}

impl CheckResult {
    fn new(name: &str) -> Self {
        Self { check_name: name.into(), cases: 0, failures: 0, worst_margin: f64::INFINITY }
    }

    /// Records one case; it fails when `margin < -slack`.
    fn record(&mut self, margin: f64, slack: f64) {
        self.cases += 1;
        if !(margin >= -slack) {
            self.failures += 1;
        }
        if margin.is_nan() || margin < self.worst_margin {
            self.worst_margin = margin;
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub bound_cases: usize,
    pub gradient_batches: usize,
    pub entropy_change_cases: usize,
    pub mask_triples: usize,
    pub ordering_pairs: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            bound_cases: 100_000,
            gradient_batches: 100,
            entropy_change_cases: 50,
            mask_triples: 1_000_000,
            ordering_pairs: 100,
        }
    }
}

pub fn run_suite(cfg: &SuiteConfig) -> Vec<CheckResult> {
    let mut out = distribution_checks(cfg.seed, cfg.bound_cases);
    out.push(gradient_oracle(cfg.seed.wrapping_add(1), cfg.gradient_batches));
    out.push(clip_deadzone(cfg.seed.wrapping_add(2), 1000));
    out.push(entropy_change_scaling(cfg.seed.wrapping_add(3), cfg.entropy_change_cases));
    out.extend(mask_checks(cfg.seed.wrapping_add(4), cfg.mask_triples));
    out.push(gradient_ordering(cfg.seed.wrapping_add(5), cfg.ordering_pairs));
    out
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(CheckResult::passed)
}

/// One random `(w, pi, k)` case with `|V|` in `2..=512`.
pub fn random_token_case<R: Rng + ?Sized>(rng: &mut R) -> (f64, Vec<f64>, usize) {
    let v = rng.random_range(2..=512);
    let pi = dirichlet(rng, v);
    let w = rng.random_range(-3.0..=3.0);
    let k = rng.random_range(0..v);
    (w, pi, k)
}

const CHUNK: usize = 1000;

/// Decomposition exactness, bound sandwich, Renyi-2 <= Shannon and the
/// collision upper bound over the same random cases.
fn distribution_checks(seed: u64, cases: usize) -> Vec<CheckResult> {
    let chunks: Vec<[CheckResult; 4]> = (0..cases.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut r = [
                CheckResult::new("decomposition_exactness"),
                CheckResult::new("bound_sandwich"),
                CheckResult::new("renyi2_le_shannon"),
                CheckResult::new("collision_upper_bound"),
            ];
            for _ in 0..CHUNK.min(cases - c * CHUNK) {
                let (w, pi, k) = random_token_case(&mut rng);
                let componentwise: f64 = pi
                    .iter()
                    .enumerate()
                    .map(|(n, &p)| {
                        let g = w * (if n == k { 1.0 } else { 0.0 } - p);
                        g * g
                    })
                    .sum();
                let exact = grad_norm_exact(w, &pi, k);
                let rel = if componentwise == 0.0 && exact == 0.0 {
                    0.0
                } else {
                    (exact - componentwise).abs() / componentwise.abs().max(exact.abs())
                };
                r[0].record(DECOMPOSITION_REL_TOL - rel, 0.0);
                let b = grad_norm_bounds(w, &pi, k);
                r[1].record(b.sandwich_margin(), SANDWICH_SLACK);
                r[2].record(b.shannon - b.renyi2, ENTROPY_INEQ_SLACK);
                r[3].record(1.0 - b.c_v * b.shannon.powi(2) - b.collision_prob, ENTROPY_INEQ_SLACK);
            }
            r
        })
        .collect();
    let mut total = [
        CheckResult::new("decomposition_exactness"),
        CheckResult::new("bound_sandwich"),
        CheckResult::new("renyi2_le_shannon"),
        CheckResult::new("collision_upper_bound"),
    ];
    for chunk in chunks {
        for (t, c) in total.iter_mut().zip(chunk) {
            t.cases += c.cases;
            t.failures += c.failures;
            t.worst_margin = t.worst_margin.min(c.worst_margin);
        }
    }
    total.into()
}

fn gradient_oracle(seed: u64, batches: usize) -> CheckResult {
    let results: Vec<f64> = (0..batches)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 * 7919));
            let case = random_case(&mut rng, &RandomCaseShape::default());
            let objective = Objective::ALL[i % 3];
            let mask = if objective == Objective::Stapo && (i / 3) % 2 == 1 {
                random_mask(&mut rng, case.batch.len(), 0.3)
            } else {
                vec![true; case.batch.len()]
            };
            match finite_difference_check(&case.policy, objective, &case.batch, &mask, &ClipConfig::default(), FD_STEP) {
                Ok(rep) => rep.max_rel_error,
                Err(_) => f64::INFINITY,
            }
        })
        .collect();
    let mut r = CheckResult::new("gradient_oracle");
    for err in results {
        r.record(FD_REL_TOL - err, 0.0);
    }
    r
}

/// Tokens whose clip branch is active must add exactly nothing.
fn clip_deadzone(seed: u64, cases: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = ClipConfig::default();
    let mut r = CheckResult::new("clip_deadzone");
    for i in 0..cases {
        let high = i % 2 == 0;
        // redraw until the behaviour probability is a valid probability
        let (policy, ctx, tok, old, adv) = loop {
            let v = rng.random_range(2..=32);
            let (policy, ctx) = random_context(&mut rng, v, 1.0);
            let tok = rng.random_range(0..v);
            let cur = policy.distribution(&ctx)[tok];
            let (ratio, adv): (f64, f64) = if high {
                (rng.random_range(1.0 + clip.eps_high + 1e-6..3.0), rng.random_range(0.01..3.0))
            } else {
                (rng.random_range(0.05..1.0 - clip.eps_low - 1e-6), -rng.random_range(0.01..3.0))
            };
            if cur / ratio <= 1.0 {
                break (policy, ctx, tok, cur / ratio, adv);
            }
        };
        let batch = TokenBatch::from_records(vec![TokenRecord {
            context: ctx,
            token: tok as u32,
            old_prob: old,
            advantage: adv,
            sequence: 0,
        }]);
        let objective = [Objective::Dapo, Objective::Stapo][i % 4 / 2];
        let g = surrogate_gradient(&policy, objective, &batch, &[true], &clip).expect("non-empty batch");
        let expected = if high { ClipState::ClippedHigh } else { ClipState::ClippedLow };
        let worst = g.grads.values().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        let ok = g.tokens[0].clip_state == expected && g.tokens[0].weight == 0.0;
        r.record(if ok { -worst } else { -1.0 }, 0.0);
    }
    r
}

/// Error of the first-order entropy prediction must shrink like `eta^2`.
pub fn entropy_change_errors(seed: u64, cases: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut totals = vec![0.0; ENTROPY_CHANGE_ETAS.len()];
    for _ in 0..cases {
        let v = rng.random_range(3..=20);
        let (policy, ctx) = random_context(&mut rng, v, 1.0);
        let visits: Vec<Visit> = (0..rng.random_range(3..=15))
            .map(|_| Visit {
                context: ctx.clone(),
                token: rng.random_range(0..v) as u32,
                advantage: rng.sample(StandardNormal),
            })
            .collect();
        for (t, &eta) in totals.iter_mut().zip(&ENTROPY_CHANGE_ETAS) {
            let pred = predict_entropy_change(&policy, &visits, eta)[&ctx];
            let actual = measure_entropy_change(&policy, &visits, eta)[&ctx];
            *t += (actual - pred).abs();
        }
    }
    totals
}

fn entropy_change_scaling(seed: u64, cases: usize) -> CheckResult {
    let errors = entropy_change_errors(seed, cases);
    let slope = log_log_slope(&ENTROPY_CHANGE_ETAS, &errors);
    let mut r = CheckResult::new("entropy_change_scaling");
    let margin = (slope - ENTROPY_CHANGE_SLOPE.0).min(ENTROPY_CHANGE_SLOPE.1 - slope);
    r.record(margin, 0.0);
    r.cases = cases;
    r
}

/// Mask against a direct restatement of the rule, and mask/cell agreement.
fn mask_checks(seed: u64, triples: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eq = CheckResult::new("s2t_mask_equivalence");
    let mut cell = CheckResult::new("mask_cell_consistency");
    let th = Thresholds { tau_p: 0.002, tau_h: 1.0 };
    for _ in 0..triples {
        let p = 10f64.powf(rng.random_range(-5.0..0.0));
        let h = rng.random_range(0.0..2.0);
        let a = rng.random_range(-2.0..2.0);
        let keep = s2t_keep(p, h, a, &th);
        let spurious = a > 0.0 && p < th.tau_p && h < th.tau_h;
        eq.record(if keep != spurious { 0.0 } else { -1.0 }, 0.0);
        let is_cell = classify_phase(p, h, a, &th).is_spurious();
        cell.record(if is_cell != keep { 0.0 } else { -1.0 }, 0.0);
    }
    vec![eq, cell]
}

/// A low-probability low-entropy token and a high-probability high-entropy
/// token with the same advantage and behaviour probability. Both sit within
/// 10% of `tau_p` so their ratios stay inside the clip range.
pub fn ordering_pair<R: Rng + ?Sized>(rng: &mut R, th: &Thresholds) -> OrderingPair {
    let v = rng.random_range(16..=256);
    let old = th.tau_p;
    let p_low = old * rng.random_range(0.9..1.0);
    let p_high = old * rng.random_range(1.0..1.1);
    let adv = rng.random_range(0.1..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };

    let dominant = rng.random_range(0.9..0.98);
    let mut low = vec![(1.0 - dominant - p_low) / (v - 2) as f64; v];
    low[0] = p_low;
    low[1] = dominant;
    let mut high = vec![(1.0 - p_high) / (v - 1) as f64; v];
    high[0] = p_high;
    OrderingPair { low, high, old_prob: old, advantage: adv }
}

#[derive(Debug, Clone)]
pub struct OrderingPair {
    /// Target token is index 0 in both distributions.
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub old_prob: f64,
    pub advantage: f64,
}

fn gradient_ordering(seed: u64, pairs: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let th = Thresholds { tau_p: 0.002, tau_h: 1.0 };
    let clip = ClipConfig::default();
    let mut r = CheckResult::new("gradient_ordering");
    for _ in 0..pairs {
        let pair = ordering_pair(&mut rng, &th);
        let norm = |pi: &[f64]| {
            let ctx = ContextKey::new("pair", &[], 1);
            let mut policy = PolicyTable::with_floor(pi.len(), 1, 0.0);
            policy.set_logits(ctx.clone(), pi.iter().map(|p| p.ln()).collect()).expect("finite");
            let batch = TokenBatch::from_records(vec![TokenRecord {
                context: ctx,
                token: 0,
                old_prob: pair.old_prob,
                advantage: pair.advantage,
                sequence: 0,
            }]);
            let g = surrogate_gradient(&policy, Objective::Dapo, &batch, &[true], &clip).expect("one token");
            let cell = classify_phase(pi[0], shannon_entropy(pi), pair.advantage, &th);
            (g.tokens[0].norm().powi(2), g.tokens[0].clip_state, cell)
        };
        let (n_low, s_low, c_low) = norm(&pair.low);
        let (n_high, s_high, c_high) = norm(&pair.high);
        let well_formed = s_low == ClipState::Unclipped
            && s_high == ClipState::Unclipped
            && c_low.prob_bin == crate::s2t::Level::Low
            && c_low.entropy_bin == crate::s2t::Level::Low
            && c_high.prob_bin == crate::s2t::Level::High
            && c_high.entropy_bin == crate::s2t::Level::High;
        let margin = if well_formed { n_low - n_high } else { -1.0 };
        // strict ordering: a tie is a failure
        r.record(if margin > 0.0 { margin } else { margin.min(-f64::MIN_POSITIVE) }, 0.0);
    }
    r
}
