//! Desk-scale laboratory for comparing tractable probabilistic circuits and
//! small decoder-only Transformers as autoregressive sequence models.
//!
//! The crate provides, end to end:
//!
//! - a tiny reverse-mode autodiff engine over f64 tensors ([`diff`]),
//! - vtrees over sequence positions with the two leaf layouts and the
//!   future masks used for autoregressive marginalization ([`vtree`]),
//! - probabilistic circuits: a generic sum/product/input DAG with exact
//!   log-space inference plus trainable balanced-tree circuits ([`circuit`]),
//! - homogeneous HMMs together with a logit-head variant ([`hmm`]),
//! - a minimal causal Transformer with logit or probability-mixture output
//!   heads and optional fixed tree-structured attention masks
//!   ([`transformer`]),
//! - synthetic copy-task generators and a character-level text ingester
//!   ([`data`]),
//! - separation-rank analysis: joint-table enumeration, an SVD rank oracle,
//!   frontier bounds, transfer ranks and the selector construction
//!   ([`analysis`]),
//! - a shared AdamW training loop with early stopping and the mixture
//!   training strategies ([`train`]), and
//! - canned experiment drivers used by the CLI and the acceptance suite
//!   ([`exp`]).

pub mod analysis;
pub mod circuit;
pub mod data;
pub mod diff;
pub mod error;
pub mod exp;
pub mod hmm;
pub mod model;
pub mod params;
pub mod train;
pub mod transformer;
pub mod vtree;

pub use error::{Error, Result};
