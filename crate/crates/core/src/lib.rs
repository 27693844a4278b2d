//! Quasi-Bernoulli stick-breaking mixtures.
//!
//! The quasi-Bernoulli (QB) prior breaks the mixture-weight stick as
//! `v_k = 1 - b_k β_k` with `b_k ∈ {ε, 1}` and `β_k ~ Beta(α, 1)`. Once an
//! `ε` draw occurs, the remaining stick is at most `ε`, which gives a soft
//! truncation between a Dirichlet process (`ε = 1`) and a finite mixture
//! with a geometric number of components (`ε = 0`).
//!
//! Modules:
//! * [`numerics`]: random sources, log-scale incomplete beta, truncated Beta draws.
//! * [`priors`]: stick-breaking constructions (QB, ε = 0, DP, PY) and stick densities.
//! * [`eppf`]: exact partition probabilities, partition enumeration, predictive
//!   new-cluster probabilities, total-variation checks and a Monte-Carlo oracle.
//! * [`components`]: observation models and their conditional updates.
//! * [`sampler`]: truncated blocked Gibbs sampler with the adjacent-swap move,
//!   plus an exact small-n posterior of the number of clusters.
//! * [`calibration`]: matching DP / PY hyperparameters to QB prior moments.
//! * [`experiments`]: synthetic data, configuration, orchestration and outputs.

pub mod calibration;
pub mod components;
pub mod eppf;
mod error;
pub mod experiments;
pub mod numerics;
pub mod priors;
pub mod sampler;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use numerics::RandomSource;
pub use priors::{DpParams, Prior, PyParams, QbParams, StickState};
