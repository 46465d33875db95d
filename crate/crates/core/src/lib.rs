//! Bi-level self-supervised online continual learning for multichannel
//! signal streams.
//!
//! The engine adapts a pretrained classifier to an unlabeled, non-iid,
//! class- and subject-incremental stream. Each incoming batch is
//! pseudo-labeled by a fast self-supervised adaptation step followed by
//! k-means clustering and a centroid-matching step that keeps labels
//! consistent with a fixed-size replay memory. The memory itself is
//! curated by entropy under a temperature-scaled softmax so that only
//! confidently classified samples are retained for replay.
//!
//! Crate layout:
//! - [`numerics`]: dense tensors, a reverse-mode tape, Adam, and a
//!   finite-difference gradient checker.
//! - [`model`]: the feature extractor / classifier / predictor bundle.
//! - [`ssl`]: the future-prediction contrastive inner loop.
//! - [`clustering`] / [`mapping`]: k-means and centroid assignment.
//! - [`memory`]: the entropy-curated replay buffer.
//! - [`stream`]: synthetic stream generation and segment file I/O.
//! - [`engine`]: the end-to-end run loop, variants and metrics.

pub mod clustering;
pub mod engine;
pub mod error;
pub mod mapping;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod par;
pub mod ssl;
pub mod stream;

pub use error::{Error, Result};
pub use numerics::Real;
