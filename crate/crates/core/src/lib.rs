//! Bayesian evaluation of inequality-constrained treatment-effect models for
//! one-way ANOVA data, together with hierarchical variance-component fits for
//! Latin-square and nested (machines within treatments) designs.
//!
//! The crate is organised by concern:
//!
//! * [`designs`] builds designs, simulates data and reads/writes datasets.
//! * [`constraints`] parses order constraints such as `{b1,b4}<{b2,b3,b5}`
//!   and computes their prior probability.
//! * [`samplers`] holds the conjugate prior, the one-way likelihood and the
//!   Gibbs sampler for the unconstrained cell-means model.
//! * [`evidence`] estimates marginal likelihoods, Bayes factors and posterior
//!   model probabilities, including variance-structure comparisons.
//! * [`hierarchical`] fits batched-effects models and summarises variance
//!   components.
//! * [`classical`] provides the F test and the random-intercept
//!   likelihood-ratio test.
//!
//! All randomness is drawn from Xoshiro256++ generators seeded through
//! SplitMix64 (see [`rng`]), so every result is a pure function of its inputs
//! and seed.

pub mod classical;
pub mod constraints;
pub mod designs;
pub mod error;
pub mod evidence;
pub mod hierarchical;
pub mod numeric;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
