//! Bundled masked-LM backends.
//!
//! [`TinyMlm`] is a trainable transformer small enough for CPU experiments;
//! [`HashLogitsMlm`] is a frozen scorer with deterministic pseudo-random
//! logits. Both share the word-level [`Vocab`].

mod stub;
mod tiny;
mod vocab;

pub use stub::HashLogitsMlm;
pub use tiny::{TinyMlm, TinyMlmConfig};
pub use vocab::{split_words, Vocab};

/// Environment variable naming the directory relative checkpoint paths resolve against.
pub const CACHE_DIR_ENV: &str = "MEMEPROMPT_CACHE_DIR";

use std::path::{Path, PathBuf};

/// Where pretrained checkpoints live: `$MEMEPROMPT_CACHE_DIR`, else
/// `$XDG_CACHE_HOME/memeprompt`, else `~/.cache/memeprompt`.
pub fn cache_dir() -> PathBuf {
    let from_env = |name: &str| std::env::var_os(name).filter(|v| !v.is_empty()).map(PathBuf::from);
    if let Some(dir) = from_env(CACHE_DIR_ENV) {
        return dir;
    }
    if let Some(xdg) = from_env("XDG_CACHE_HOME") {
        return xdg.join("memeprompt");
    }
    from_env("HOME")
        .map(|h| h.join(".cache").join("memeprompt"))
        .unwrap_or_else(|| PathBuf::from(".memeprompt-cache"))
}

/// Absolute paths pass through; relative ones resolve under [`cache_dir`].
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        cache_dir().join(path)
    }
}
