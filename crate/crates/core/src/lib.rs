//! Edge/cloud routing toolkit for vision-language model pairs.
//!
//! The pipeline mirrors how a router is built and used:
//!
//! ```text
//! RSD records ──► pair view ──► edge-competency labels ──► stratified split
//!                                                          │
//!   embeddings + text/image statistics ──► feature bundles ┘
//!                                                          ▼
//!                               router training (BCE, Adam, one-cycle)
//!                                                          ▼
//!                      per-epoch τ grid search on RCS ──► RouterState
//!                                                          ▼
//!                  evaluation (APSP / CA / AIL / RCS, ACC, PGR, savings)
//! ```
//!
//! [`synthgen`] produces deterministic synthetic datasets that flow through
//! the same code paths as real data, together with brute-force oracles.

pub mod classifier;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod fsutil;
pub mod labeling;
pub mod rsd;
pub mod synthgen;

pub use error::{Error, Result};
pub use labeling::{LabelStrategy, RoutingLabel};
pub use rsd::{Dataset, ModelOutcome, PairRecord, ResponseRecord, ScenarioConfig, Split, SplitAssignment};
