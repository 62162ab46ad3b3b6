//! Inference of intra- and inter-cellular gene-gene coupling matrices from
//! spatially resolved expression, and counterfactual generation of expression
//! fields under a fitted coupling model.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds the domain types and the closed-form mean-field math
//!   (sufficient statistics, log-partition, likelihood and its gradient).
//! * [`graph`] builds spatial neighbour graphs and hop shells from coordinates.
//! * [`inference`] fits a coupling model by gradient descent on the likelihood.
//! * [`generation`] relaxes expression fields by projected gradient ascent on
//!   the Hamiltonian, optionally with frozen (intervened) entries.
//! * [`perturbation`] runs in-silico knockouts and scores their propagation.
//! * [`stats`] provides Spearman, Mann-Whitney U and permutation nulls.
//! * [`harness`] reproduces the simulate-then-infer and split-consistency
//!   identifiability experiments, plus an exact enumeration oracle.
//! * [`io`] reads count matrices and coordinates, normalises them, and
//!   persists fitted models.

pub mod error;
pub mod exec;
pub mod generation;
pub mod graph;
pub mod harness;
pub mod inference;
pub mod io;
pub mod model;
pub mod perturbation;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Execution;
pub use graph::{Adjacency, SpatialGraph};
pub use model::{GeneExpressionMatrix, InteractionModel, SufficientStatistics};

/// Version string written into saved models and reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
