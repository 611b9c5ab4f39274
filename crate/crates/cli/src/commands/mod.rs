pub mod bench;
pub mod generate;
pub mod plan;
pub mod stream;
pub mod train;
pub mod vae_check;

use crate::config::RunConfig;
use crate::error::CliResult;
use crate::text::ToyTextEmbedder;
use vidflow_core::Tensor;

/// Prompt used when a command's `*.prompt` key is unset.
pub const DEFAULT_PROMPT: &str = "a toy clip";

/// `(prompt context, null context)` for a model with `text_dim`-wide context.
pub(crate) fn contexts(cfg: &RunConfig, key: &str, text_dim: usize) -> (Tensor, Tensor) {
    let e = ToyTextEmbedder::new(text_dim);
    (e.embed(&cfg.text(key, DEFAULT_PROMPT)), e.embed(""))
}

/// Validates a count option against a lower bound.
pub(crate) fn at_least(cfg: &RunConfig, key: &str, default: usize, min: usize) -> CliResult<usize> {
    let v: usize = cfg.get_or(key, default)?;
    if v < min {
        return Err(crate::error::CliError::input(format!("{key} must be >= {min}, got {v}")));
    }
    Ok(v)
}
