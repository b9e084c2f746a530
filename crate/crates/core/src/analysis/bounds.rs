//! Exact logit-gradient norm of one token and its entropy-based bounds.

use serde::{Deserialize, Serialize};

use crate::policy::shannon_entropy;

/// `(|V| - 1) / (|V| (ln |V|)^2)`
pub fn c_v(vocab_size: usize) -> f64 {
    let v = vocab_size as f64;
    (v - 1.0) / (v * v.ln().powi(2))
}

/// `sum_n pi_n^2`
pub fn collision_probability(pi: &[f64]) -> f64 {
    pi.iter().map(|p| p * p).sum()
}

/// Order-2 Renyi entropy, `-ln sum_n pi_n^2`.
pub fn renyi2_entropy(pi: &[f64]) -> f64 {
    -collision_probability(pi).ln()
}

/// Squared 2-norm of `w * (one_hot(target) - pi)`, i.e.
/// `|w|^2 (1 - 2 pi_k + sum_n pi_n^2)`.
///
/// Evaluated as `(1 - pi_k)^2 + sum_{n != k} pi_n^2`, which is the same
/// quantity without the cancellation the expanded form suffers when
/// `pi_k` is close to 1.
pub fn grad_norm_exact(w: f64, pi: &[f64], target: usize) -> f64 {
    let off: f64 = pi.iter().enumerate().filter(|&(n, _)| n != target).map(|(_, p)| p * p).sum();
    let on = 1.0 - pi[target];
    w * w * (on * on + off)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub exact_norm_sq: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub collision_prob: f64,
    pub renyi2: f64,
    pub shannon: f64,
    pub c_v: f64,
}

impl BoundReport {
    /// Smallest of `exact - lower` and `upper - exact`; negative means a
    /// bound is violated.
    pub fn sandwich_margin(&self) -> f64 {
        (self.exact_norm_sq - self.lower_bound).min(self.upper_bound - self.exact_norm_sq)
    }
}

/// Lower `|w|^2 (1 - 2 pi_k + e^{-H})`, upper `|w|^2 (2 - 2 pi_k - C_V H^2)`.
pub fn grad_norm_bounds(w: f64, pi: &[f64], target: usize) -> BoundReport {
    let shannon = shannon_entropy(pi);
    let cv = c_v(pi.len());
    let pk = pi[target];
    let w2 = w * w;
    BoundReport {
        exact_norm_sq: grad_norm_exact(w, pi, target),
        lower_bound: w2 * (1.0 - 2.0 * pk + (-shannon).exp()),
        upper_bound: w2 * (2.0 - 2.0 * pk - cv * shannon * shannon),
        collision_prob: collision_probability(pi),
        renyi2: renyi2_entropy(pi),
        shannon,
        c_v: cv,
    }
}
