//! Cross-domain similarity learning for open-set recognition.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode differentiation (including
//!   gradients of gradients) and a symmetric eigensolver.
//! - [`metrics`]: pairwise-difference covariances and Mahalanobis distances.
//! - [`losses`]: cross-domain triplet, large-margin cosine and triplet losses.
//! - [`model`]: the representation network and its classifier/embedding heads.
//! - [`data`]: synthetic multi-domain identities, class-balanced sampling, dataset files.
//! - [`trainer`]: the episodic meta-train/meta-test loop.
//! - [`eval`]: ROC, TAR@FAR, rank-1, identification and leave-one-domain-out protocols.
//! - [`cli`]: the `cdt` command-line front end.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
