//! Numerical checks on the gradient, its norm bounds, entropy dynamics and
//! the masking rule.

pub mod bounds;
pub mod dynamics;
pub mod gradcheck;
pub mod random;
pub mod suite;

pub use bounds::{c_v, collision_probability, grad_norm_bounds, grad_norm_exact, renyi2_entropy, BoundReport};
pub use dynamics::{
    advantage_signal, context_updates, learning_potential_report, log_log_slope, log_prob_covariance,
    measure_entropy_change, predict_entropy_change, ContextUpdate, LearningPotentialReport, PartitionStats, Visit,
};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use suite::{all_passed, run_suite, CheckResult, SuiteConfig};
