//! Central-difference check of the closed-form surrogate gradient.

use serde::{Deserialize, Serialize};

use crate::objectives::{surrogate_gradient, surrogate_value, ClipConfig, Objective, ObjectiveError, TokenBatch};
use crate::policy::PolicyTable;

/// Pairs where both the analytic and numeric derivative fall below this are
/// not compared.
pub const SKIP_BELOW: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Perturbs every logit of every context the batch touches by `±h` and
/// compares `(J(a + h e) - J(a - h e)) / 2h` with the analytic gradient.
/// The mask is held fixed while perturbing.
pub fn finite_difference_check(
    policy: &PolicyTable,
    objective: Objective,
    batch: &TokenBatch,
    mask: &[bool],
    clip: &ClipConfig,
    h: f64,
) -> Result<GradCheckReport, ObjectiveError> {
    assert!(h > 0.0, "step must be positive");
    let analytic = surrogate_gradient(policy, objective, batch, mask, clip)?;
    let mut contexts: Vec<_> = batch.records().iter().map(|r| r.context.clone()).collect();
    contexts.sort();
    contexts.dedup();

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, skipped: 0 };
    let mut probe = policy.clone();
    for ctx in &contexts {
        let row = analytic.grads.get(ctx);
        for n in 0..policy.vocab_size() {
            probe.nudge_logit(ctx, n, h);
            let plus = surrogate_value(&probe, objective, batch, mask, clip)?;
            probe.set_logits(ctx.clone(), policy.logits(ctx)).expect("original logits are valid");
            probe.nudge_logit(ctx, n, -h);
            let minus = surrogate_value(&probe, objective, batch, mask, clip)?;
            probe.set_logits(ctx.clone(), policy.logits(ctx)).expect("original logits are valid");

            let numeric = (plus - minus) / (2.0 * h);
            let exact = row.map_or(0.0, |g| g[n]);
            let abs = (numeric - exact).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            if numeric.abs() < SKIP_BELOW && exact.abs() < SKIP_BELOW {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(abs / numeric.abs().max(exact.abs()));
        }
    }
    Ok(report)
}
