//! Sequence labeling with an attentive ensemble of syntactic information:
//! per-type key-value memories over POS, constituent and dependency
//! features, attention across the types, a gate against the context
//! encoder, and a linear-chain CRF on top.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod crf;
pub mod data;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod model;
pub mod synextract;
pub mod synparse;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
