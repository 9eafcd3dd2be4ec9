//! Model configuration documents.
//!
//! A configuration is a JSON object `{"model": "fedbatch" | "mri",
//! "params": { ... }}` whose `params` fields all have defaults, so `{}` is a
//! valid parameter block. Parsing is strict (unknown fields are rejected) and
//! is followed by the model's parameter-invariant checks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ModelConfig;

/// Parse and validate a configuration document from raw bytes.
///
/// This is the untrusted-input entry point (also the fuzzing surface): any
/// byte string must either produce a validated configuration or a clean
/// error, never a panic.
pub fn parse_model_config(bytes: &[u8]) -> Result<ModelConfig> {
    let cfg: ModelConfig = serde_json::from_slice(bytes)
        .map_err(|e| Error::Config(format!("model config parse error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read a configuration document from disk.
pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let bytes = std::fs::read(path)?;
    parse_model_config(&bytes)
}
