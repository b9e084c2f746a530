//! Tabular softmax policies trained with group-normalized clipped surrogate
//! objectives on verifiable arithmetic tasks, with an optional mask that drops
//! positive-advantage tokens that are both improbable and low-entropy.

pub mod analysis;
pub mod domain;
pub mod objectives;
pub mod policy;
pub mod s2t;
pub mod tasks;
pub mod trainer;
