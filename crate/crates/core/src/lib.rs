//! Alignment-aware post-training quantization for toy language models.
//!
//! Learnable equivalent transforms (per-channel scaling plus a Cayley
//! rotation) are optimized so that a fake-quantized fine-tuned model keeps the
//! fine-tuned model's high-probability outputs while moving away from the
//! pre-trained model where the two disagree. The crate ships its own TinyLM
//! fixtures, evaluation harness and a small CLI (`aaq`).
//!
//! Start with [`pipeline::run_aaq`] or the programs under `examples/`.

pub mod apc;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod quantizer;
pub mod transform;

pub use error::{AaqError, Result};

use std::path::Path;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| AaqError::InvalidArgument(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| AaqError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| AaqError::io(path, e))
}
