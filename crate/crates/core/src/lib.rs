//! Genre classification of videos from Fisher-encoded frame descriptors.
//!
//! Variable-length per-keyframe descriptor sequences are encoded into fixed
//! length Fisher vectors over a diagonal-covariance GMM, scored per genre by
//! one-vs-rest linear SVMs, optionally combined with TF-IDF metadata scores by
//! late fusion, and evaluated with Mean Average Precision.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod fisher;
pub mod fusion;
pub mod gmm;
mod io_util;
pub mod pipeline;
pub mod svm;
pub mod synthetic;
pub mod text;
pub mod visual;

pub use error::{Error, Result};
