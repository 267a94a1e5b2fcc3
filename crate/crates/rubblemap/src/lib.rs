//! Two-stage damage assessment for small textured scenes.
//!
//! Stage one labels every pixel (a linear class-probability model over
//! filter-bank descriptors, smoothed by a fully-connected CRF with Potts
//! compatibility and Gaussian kernels). Stage two re-classifies each
//! extracted segment from a Fisher-vector encoding of its local descriptors
//! under a diagonal Gaussian mixture, with a one-vs-all linear SVM. A
//! deterministic synthetic-scene generator supplies desk-scale corpora with
//! multi-annotator polygon annotations, and the pipeline module wires the
//! stages into train / infer / cross-validate flows.

pub mod config;
pub mod crf;
pub mod descriptors;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod format;
pub mod gmm;
pub mod imaging;
mod kmeans;
pub mod pipeline;
pub mod segments;
pub mod svm;
pub mod synth;
pub mod unary;

pub use error::{Error, Result};
