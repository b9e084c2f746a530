//! First-order entropy dynamics of a softmax context under a logit update,
//! and the entropy-partitioned update-magnitude report.
//!
//! For a context with logits `a` updated as `a' = a + eta * s`, where `s_y`
//! is the advantage signal applied to token `y`, the entropy changes by
//! `-eta * Cov_{y ~ pi}(ln pi(y), s_y) + O(eta^2)`. For a tabular softmax the
//! logits are the natural parameters, so a plain ascent step on them is the
//! setting in which this covariance form holds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::TokenId;
use crate::policy::{ContextKey, PolicyTable};

/// One visit: the update applies `advantage` to `token` at `context`.
#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub context: ContextKey,
    pub token: TokenId,
    pub advantage: f64,
}

/// Visitation-weighted advantage signal per context: `s[ctx][y]` sums the
/// advantages of every visit of `y` at `ctx`; unvisited tokens get 0.
pub fn advantage_signal(vocab_size: usize, visits: &[Visit]) -> BTreeMap<ContextKey, Vec<f64>> {
    let mut out: BTreeMap<ContextKey, Vec<f64>> = BTreeMap::new();
    for v in visits {
        out.entry(v.context.clone()).or_insert_with(|| vec![0.0; vocab_size])[v.token as usize] += v.advantage;
    }
    out
}

/// `Cov_{y ~ pi}(ln pi(y), s_y)`
pub fn log_prob_covariance(pi: &[f64], signal: &[f64]) -> f64 {
    let mut e_ls = 0.0;
    let mut e_l = 0.0;
    let mut e_s = 0.0;
    for (&p, &s) in pi.iter().zip(signal) {
        if p > 0.0 {
            let l = p.ln();
            e_ls += p * l * s;
            e_l += p * l;
        }
        e_s += p * s;
    }
    e_ls - e_l * e_s
}

/// Predicted entropy change per visited context after a step of size `eta`
/// along [`advantage_signal`].
pub fn predict_entropy_change(
    policy: &PolicyTable,
    visits: &[Visit],
    eta: f64,
) -> BTreeMap<ContextKey, f64> {
    advantage_signal(policy.vocab_size(), visits)
        .into_iter()
        .map(|(ctx, s)| {
            let pi = policy.distribution(&ctx);
            let pred = -eta * log_prob_covariance(&pi, &s);
            (ctx, pred)
        })
        .collect()
}

/// Observed entropy change per context after applying the signal with an
/// unclipped ascent step on a scratch copy.
pub fn measure_entropy_change(
    policy: &PolicyTable,
    visits: &[Visit],
    eta: f64,
) -> BTreeMap<ContextKey, f64> {
    let signal = advantage_signal(policy.vocab_size(), visits);
    let mut scratch = policy.clone();
    scratch
        .apply_gradient(&signal, eta, f64::INFINITY)
        .expect("finite signal and positive step");
    signal
        .keys()
        .map(|ctx| (ctx.clone(), scratch.entropy(ctx) - policy.entropy(ctx)))
        .collect()
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Logit change of one context across an update, with the entropy of the
/// token distribution it was taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextUpdate {
    pub context: ContextKey,
    pub entropy: f64,
    pub delta: Vec<f64>,
}

impl ContextUpdate {
    pub fn mean_abs_delta(&self) -> f64 {
        self.delta.iter().map(|d| d.abs()).sum::<f64>() / self.delta.len() as f64
    }
}

/// Contexts whose logits differ between `before` and `after`, paired with
/// their pre-update entropy.
pub fn context_updates(before: &PolicyTable, after: &PolicyTable) -> Vec<ContextUpdate> {
    after
        .contexts()
        .filter_map(|(ctx, row)| {
            let old = before.logits(ctx);
            let delta: Vec<f64> = row.iter().zip(&old).map(|(a, b)| a - b).collect();
            delta.iter().any(|&d| d != 0.0).then(|| ContextUpdate {
                context: ctx.clone(),
                entropy: before.entropy(ctx),
                delta,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub count: usize,
    pub mean_abs_delta: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningPotentialReport {
    pub low_entropy: PartitionStats,
    pub high_entropy: PartitionStats,
}

/// Splits updated contexts at `tau_h` (`H >= tau_h` is high) and averages the
/// mean absolute logit change in each half. Descriptive only.
pub fn learning_potential_report(updates: &[ContextUpdate], tau_h: f64) -> LearningPotentialReport {
    let mut low = (0usize, 0.0);
    let mut high = (0usize, 0.0);
    for u in updates {
        let bucket = if u.entropy >= tau_h { &mut high } else { &mut low };
        bucket.0 += 1;
        bucket.1 += u.mean_abs_delta();
    }
    let stats = |(n, s): (usize, f64)| PartitionStats {
        count: n,
        mean_abs_delta: if n == 0 { 0.0 } else { s / n as f64 },
    };
    LearningPotentialReport { low_entropy: stats(low), high_entropy: stats(high) }
}
