//! Spurious-token detection.
//!
//! A token is spurious when its trajectory has positive advantage, its
//! current probability is below the absolute threshold `tau_p`, and the
//! entropy of its next-token distribution is below `tau_h`. `tau_h` is not a
//! fixed number: it is the `entropy_quantile` nearest-rank quantile of the
//! entropies in the current mini-batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum S2TError {
    #[error("cannot take a quantile of an empty entropy list")]
    EmptyBatch,
    #[error("quantile {0} not in (0,1)")]
    Quantile(f64),
    #[error("tau_p {0} not in [0,1)")]
    TauP(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct S2TConfig {
    /// Absolute probability threshold, never a quantile.
    pub tau_p: f64,
    /// Tokens strictly below this quantile of mini-batch entropies are
    /// eligible for masking; 0.8 means the bottom 80%.
    pub entropy_quantile: f64,
}

impl Default for S2TConfig {
    fn default() -> Self {
        Self { tau_p: 0.002, entropy_quantile: 0.8 }
    }
}

impl S2TConfig {
    pub fn validate(&self) -> Result<(), S2TError> {
        // tau_p = 0 is allowed: it disables the mask.
        if !(self.tau_p >= 0.0 && self.tau_p < 1.0) {
            return Err(S2TError::TauP(self.tau_p));
        }
        if !(self.entropy_quantile > 0.0 && self.entropy_quantile < 1.0) {
            return Err(S2TError::Quantile(self.entropy_quantile));
        }
        Ok(())
    }

    /// Fixes `tau_h` for one mini-batch.
    pub fn resolve(&self, entropies: &[f64]) -> Result<Thresholds, S2TError> {
        self.validate()?;
        Ok(Thresholds { tau_p: self.tau_p, tau_h: resolve_tau_h(entropies, self.entropy_quantile)? })
    }
}

/// Thresholds in force for one mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_p: f64,
    pub tau_h: f64,
}

/// Nearest-rank quantile: the `ceil(q * n)`-th smallest value.
pub fn resolve_tau_h(entropies: &[f64], q: f64) -> Result<f64, S2TError> {
    if entropies.is_empty() {
        return Err(S2TError::EmptyBatch);
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(S2TError::Quantile(q));
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    // q * n can land one ulp above an integer; take the smallest rank r with r/n >= q.
    if rank > 1 && (rank - 1) as f64 / n as f64 >= q {
        rank -= 1;
    }
    Ok(sorted[rank - 1])
}

/// Keep flag: `false` iff `A > 0 && p < tau_p && H < tau_h`.
pub fn s2t_keep(cur_prob: f64, entropy: f64, advantage: f64, th: &Thresholds) -> bool {
    !(advantage > 0.0 && cur_prob < th.tau_p && entropy < th.tau_h)
}

/// The 0/1 mask value.
pub fn s2t_mask(cur_prob: f64, entropy: f64, advantage: f64, th: &Thresholds) -> u8 {
    s2t_keep(cur_prob, entropy, advantage, th) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageSign {
    Positive,
    /// Also covers a zero advantage, which can never be spurious.
    Negative,
}

/// One cell of the 2x2x2 probability / advantage / entropy partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhaseCell {
    pub prob_bin: Level,
    pub adv_sign: AdvantageSign,
    pub entropy_bin: Level,
}

impl PhaseCell {
    pub const SPURIOUS: PhaseCell =
        PhaseCell { prob_bin: Level::Low, adv_sign: AdvantageSign::Positive, entropy_bin: Level::Low };

    pub fn all() -> [PhaseCell; 8] {
        let mut out = [Self::SPURIOUS; 8];
        let mut i = 0;
        for prob_bin in [Level::Low, Level::High] {
            for adv_sign in [AdvantageSign::Positive, AdvantageSign::Negative] {
                for entropy_bin in [Level::Low, Level::High] {
                    out[i] = PhaseCell { prob_bin, adv_sign, entropy_bin };
                    i += 1;
                }
            }
        }
        out
    }

    pub fn is_spurious(&self) -> bool {
        *self == Self::SPURIOUS
    }

    /// Compact label such as `p-low/a+/h-low`.
    pub fn label(&self) -> String {
        let lv = |l: Level| if l == Level::Low { "low" } else { "high" };
        let sign = if self.adv_sign == AdvantageSign::Positive { "+" } else { "-" };
        format!("p-{}/a{}/h-{}", lv(self.prob_bin), sign, lv(self.entropy_bin))
    }
}

/// `p >= tau_p` and `H >= tau_h` are "high".
pub fn classify_phase(cur_prob: f64, entropy: f64, advantage: f64, th: &Thresholds) -> PhaseCell {
    PhaseCell {
        prob_bin: if cur_prob >= th.tau_p { Level::High } else { Level::Low },
        adv_sign: if advantage > 0.0 { AdvantageSign::Positive } else { AdvantageSign::Negative },
        entropy_bin: if entropy >= th.tau_h { Level::High } else { Level::Low },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub count: usize,
    pub mean_grad_norm: f64,
    pub mean_entropy: f64,
}

/// Aggregates `(cell, grad_norm, entropy)` rows; empty cells are absent.
pub fn cell_statistics<I>(rows: I) -> BTreeMap<PhaseCell, CellStats>
where
    I: IntoIterator<Item = (PhaseCell, f64, f64)>,
{
    let mut sums: BTreeMap<PhaseCell, (usize, f64, f64)> = BTreeMap::new();
    for (cell, norm, entropy) in rows {
        let e = sums.entry(cell).or_default();
        e.0 += 1;
        e.1 += norm;
        e.2 += entropy;
    }
    sums.into_iter()
        .map(|(cell, (n, g, h))| {
            let c = n as f64;
            (cell, CellStats { count: n, mean_grad_norm: g / c, mean_entropy: h / c })
        })
        .collect()
}
