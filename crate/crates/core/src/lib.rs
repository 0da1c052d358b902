//! Fairness-aware repair of categorical tabular data.
//!
//! The crate identifies the inadmissible attributes that feed the label
//! directly, splits them into two weakly dependent blocks, fits a latent
//! variable factorization over those blocks and the label by EM, and
//! resamples the table from the fitted factorization so that the label no
//! longer depends on sensitive attributes except through admissible ones.
//!
//! Module map:
//!
//! * [`dataset`]: CSV loading, categorical encoding, attribute roles.
//! * [`stats`]: plug-in entropy, mutual information and NMI.
//! * [`ci_tests`]: chi-square and pooled G-test with a hand-rolled
//!   chi-square survival function.
//! * [`identify`]: finds the inadmissible direct parents of the label.
//! * [`partition`]: hill-climbing bipartition of those parents.
//! * [`latent_em`]: EM over the latent-augmented factorization.
//! * [`pipeline`]: end-to-end repair.
//! * [`metrics`]: ROD, AUC, latent diagnostics and a reference classifier.
//! * [`synthgen`]: categorical DAG sampler for fixtures and scaling runs.

pub mod dataset;
pub mod error;
pub mod identify;
pub mod latent_em;
pub mod metrics;
pub mod partition;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod synthgen;

pub use dataset::{CategoricalDomain, Dataset, RoleSpec};
pub use error::{Error, Result};
