//! Time-weighted transformer for knowledge tracing.

pub mod attention;
pub mod cli;
pub mod config;
pub mod embeddings;
pub mod error;
pub mod ingest;
pub mod model;
pub mod numeric;
pub mod prepared;
pub mod sequences;
pub mod streaming;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
