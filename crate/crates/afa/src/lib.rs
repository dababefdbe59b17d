//! Meta active feature acquisition on synthetic task priors.
//!
//! This crate trains a single transformer sequence model across a distribution
//! of tasks so that, on a new task, it can (a) predict labels from partially
//! observed feature vectors in-context and (b) greedily decide which feature to
//! measure next. Tasks come from Gaussian-process and Bayesian-neural-network
//! priors with controlled missingness; small discrete worlds with explicit
//! joint probability tables provide exact oracles (brute-force conditional
//! mutual information, identification checks, greedy reference policies)
//! against which the learned components are graded.
//!
//! The crate is organized as a library with runnable examples under
//! `examples/` and a single `afa` binary exposing the pipeline subcommands
//! (`gen-tasks`, `pretrain-predictor`, `pretrain-policy`, `acquire`,
//! `evaluate`, `compare`, `oracle-check`).

pub mod acquire;
pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod oracle;
pub mod tasks;
pub mod train;
pub mod util;

pub use error::{Error, Result};
