//! Meta-learning with information-theoretic meta-regularization.
//!
//! The crate provides a small reverse-mode autodiff engine, MAML and CNP
//! learners with their meta-regularized variants (on activations and on
//! weights), non-mutually-exclusive task generators, memorization
//! diagnostics, a PAC-Bayes bound calculator and an experiment harness.

pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod learners;
pub mod nets;
pub mod optim;
pub mod pacbayes;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
