//! Hierarchical multi-label code assignment over clinical-style documents.
//!
//! The pipeline: raw documents are tokenized and encoded against a vocabulary
//! ([`corpus`]), gold codes are normalized and expanded over an inheritance
//! hierarchy ([`hierarchy`]), per-level code co-occurrence graphs feed a graph
//! convolution ([`cograph`], [`gcn`]), a multi-filter residual convolutional
//! encoder summarizes the text ([`encoder`]), and a level-by-level prediction
//! head with dual attention and a dependency gate assigns codes ([`hpm`]).
//! Everything numeric runs on a small reverse-mode tape ([`tensor`]) so the
//! whole model is checkable against central finite differences.
//!
//! Batch work (per-record gradients, graph counting, evaluation) is
//! data-parallel via rayon when the `parallel` feature is enabled (default)
//! and falls back to sequential loops otherwise; results are bit-identical
//! either way because reductions always run in input order.

pub mod cograph;
pub mod corpus;
pub mod encoder;
mod error;
pub mod gcn;
pub mod hierarchy;
pub mod hpm;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
