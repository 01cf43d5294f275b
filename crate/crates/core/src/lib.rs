//! Source-free active domain adaptation over feature-space ordinal data.
//!
//! The pipeline has three stages that share one set of parametric
//! components ([`nets`]):
//!
//! 1. [`source`]: pretrain an encoder/classifier on labeled source data with
//!    cross-entropy plus a chain-contrastive term, then train a
//!    label-conditioned feature generator against the frozen classifier.
//! 2. [`active`]: build neighbourhood-averaged local representations of the
//!    target set and greedily pick the subset that minimises squared MMD to
//!    the whole set.
//! 3. [`adapt`]: adapt the model to the target domain with prototype
//!    alignment, inter/intra consistency, mixup and mixup-verified
//!    pseudo-labels.
//!
//! [`synth`] supplies the two-domain benchmark, [`metrics`] the evaluation
//! suite and [`harness`] the experiment orchestration used by the CLI.

pub mod active;
pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod diffmath;
mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod source;
pub mod synth;

pub use error::{Error, Result};
