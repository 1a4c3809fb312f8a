//! Semi-supervised continual learning for binary detection under concept
//! drift and a labeling budget.
//!
//! The crate is organized by subsystem:
//!
//! - [`numerics`]: cosine distance, thin SVD, subspace projection.
//! - [`model`]: the MLP detector with manual backpropagation.
//! - [`repspace`]: representation space of buffered exemplars and
//!   threshold-swept exemplar matching.
//! - [`gpm`]: gradient projection memory.
//! - [`memory`]: chunked replay buffer with delayed admission.
//! - [`active`]: budgeted selection of unlabeled samples for labeling.
//! - [`data`]: CSV ingestion, task construction, label masking and noise,
//!   and a synthetic drifting stream.
//! - [`metrics`]: PR-AUC, AUT, TPR at a fixed FPR.
//! - [`trainer`]: the seen/unseen training pipeline and experiment runner.
//! - [`config`] and [`report`]: the text config format and AUT tables used
//!   by the `sscl` binary.

pub mod active;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gpm;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod report;
pub mod repspace;
pub mod trainer;

pub use error::{Error, Result};
