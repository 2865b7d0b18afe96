//! The frozen black-box embedding model behind a provider interface.
//!
//! Three implementations: a deterministic stub (tests, synthetic runs), a
//! file store of precomputed vectors, and an HTTP client. A persistent
//! binary cache can wrap any of them. Every provider returns unit-norm
//! vectors; for a fixed identity tag the same text always yields the same
//! vector, which is what makes the cache transparent.

mod cache;
mod file_store;
mod http;
mod stub;

pub use cache::{cache_fill, CachedProvider, EmbeddingCache, FillReport};
pub use file_store::FileStoreProvider;
pub use http::{HttpProvider, HttpProviderConfig, EMBED_TOKEN_ENV};
pub use stub::{stub_embed, StubProvider};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::vector::{EmbeddingVector, VectorError};

/// Default upper bound on texts per `embed_batch` call.
pub const DEFAULT_MAX_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("batch of {got} texts exceeds provider maximum {max}")]
    BatchTooLarge { got: usize, max: usize },
    #[error("stub embedding dimension must be >= 2, got {0}")]
    DimTooSmall(usize),
    #[error("missing precomputed embedding for text hash {hash}")]
    MissingPrecomputed { hash: String },
    #[error("backend returned dimension {got}, expected {expected}")]
    DimensionDrift { expected: usize, got: usize },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("environment variable {0} is not set (required for the HTTP provider)")]
    TokenMissing(&'static str),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("cache identity mismatch: cache written by `{cache}`, provider is `{provider}`")]
    IdentityMismatch { cache: String, provider: String },
    #[error("cache file {path}: {message}")]
    CacheFormat { path: String, message: String },
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A frozen embedding model consumed only through its output vectors.
pub trait BlackBoxProvider: Send + Sync {
    /// Output dimensionality; constant for the provider's lifetime.
    fn embed_dim(&self) -> usize;

    /// Stable tag identifying the underlying model, used for cache keying.
    fn identity(&self) -> &str;

    fn max_batch(&self) -> usize {
        DEFAULT_MAX_BATCH
    }

    /// Embed one batch. One unit-norm vector per input, order preserved.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, ProviderError>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

/// Embed any number of texts by chunking into provider-sized batches.
pub fn embed_all(
    provider: &dyn BlackBoxProvider,
    texts: &[&str],
) -> Result<Vec<EmbeddingVector>, ProviderError> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(provider.max_batch().max(1)) {
        out.extend(provider.embed_batch(chunk)?);
    }
    Ok(out)
}

pub(crate) fn reject_bad_batch(texts: &[&str], max: usize) -> Result<(), ProviderError> {
    if texts.len() > max {
        return Err(ProviderError::BatchTooLarge { got: texts.len(), max });
    }
    if texts.iter().any(|t| t.is_empty()) {
        return Err(ProviderError::EmptyText);
    }
    Ok(())
}

/// 256-bit cache key over (identity tag, exact text bytes); the tag is
/// length-prefixed so distinct (tag, text) pairs cannot collide structurally.
pub fn text_key(identity: &str, text: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update((identity.len() as u64).to_le_bytes());
    hasher.update(identity.as_bytes());
    hasher.update(text.as_bytes());
    hasher.finalize().into()
}

pub(crate) fn hex32(key: &[u8; 32]) -> String {
    let mut s = String::with_capacity(64);
    for b in key {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
