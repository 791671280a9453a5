//! Lasso and adaptive-lasso penalized generalized linear mixed models for
//! longitudinal traits, with a polygenic random intercept and subject-level
//! random intercepts and slopes.

pub mod cli;
pub mod error;
pub mod evaluate;
pub mod genotype;
pub mod grm;
pub mod linalg;
pub mod model;
pub mod null_fit;
pub mod penalized;
pub mod phenotype;
pub mod sigma;
pub mod simulate;

pub use error::{Error, Result};

/// Best-effort name of the pipeline stage that produced a file, read from the
/// `stage` field of a JSON document.
pub fn sniff_stage(bytes: &[u8]) -> String {
    serde_json::from_slice::<serde_json::Value>(bytes)
        .ok()
        .and_then(|v| v.get("stage").and_then(|s| s.as_str()).map(String::from))
        .unwrap_or_else(|| "unrecognized file".to_string())
}
