//! Deterministic stand-in for a remote embedding backend.
//!
//! Character 3-grams are hashed into a signed count vector and normalized.
//! The output depends only on (seed, dim, text) — never on call order or
//! platform — so tests and synthetic experiments are exactly reproducible.

use crate::provider::{reject_bad_batch, BlackBoxProvider, ProviderError};
use crate::rng::hash64;
use crate::vector::{l2_normalize, EmbeddingVector};

/// Hash-based lexical embedder with a fixed identity per (seed, dim).
#[derive(Debug, Clone)]
pub struct StubProvider {
    seed: u64,
    dim: usize,
    identity: String,
}

impl StubProvider {
    pub fn new(seed: u64, dim: usize) -> Result<Self, ProviderError> {
        if dim < 2 {
            return Err(ProviderError::DimTooSmall(dim));
        }
        Ok(Self { seed, dim, identity: format!("stub-{seed}-{dim}") })
    }
}

impl BlackBoxProvider for StubProvider {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn identity(&self) -> &str {
        &self.identity
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        reject_bad_batch(texts, self.max_batch())?;
        texts.iter().map(|t| stub_embed(self.seed, self.dim, t)).collect()
    }
}

/// Hash the text's character 3-grams into a `dim`-length signed count vector,
/// then L2-normalize. Texts shorter than 3 characters contribute the whole
/// text as a single feature so the vector is never all-zero.
pub fn stub_embed(seed: u64, dim: usize, text: &str) -> Result<EmbeddingVector, ProviderError> {
    if dim < 2 {
        return Err(ProviderError::DimTooSmall(dim));
    }
    if text.is_empty() {
        return Err(ProviderError::EmptyText);
    }
    let mut counts = vec![0.0f64; dim];
    let chars: Vec<char> = text.chars().collect();
    let mut bump = |gram: &str| {
        let h = hash64(seed, &[b"stub3", gram.as_bytes()]);
        let idx = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        counts[idx] += sign;
    };
    if chars.len() < 3 {
        bump(text);
    } else {
        let mut gram = String::with_capacity(12);
        for window in chars.windows(3) {
            gram.clear();
            gram.extend(window);
            bump(&gram);
        }
    }
    let raw = EmbeddingVector::new(counts)?;
    // Signed counts can cancel to zero; fall back to a fixed unit vector so
    // the provider contract (unit norm) still holds.
    if raw.norm() == 0.0 {
        let mut fallback = vec![0.0; dim];
        fallback[0] = 1.0;
        return Ok(EmbeddingVector::new(fallback)?);
    }
    Ok(l2_normalize(&raw)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use crate::vector::cosine;
    use rand::Rng;

    #[test]
    fn stub_is_deterministic() {
        let a = stub_embed(1, 8, "abc").unwrap();
        let b = stub_embed(1, 8, "abc").unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn stub_output_is_unit_norm() {
        for text in ["a", "ab", "abc", "a longer sentence with several words"] {
            let v = stub_embed(3, 16, text).unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-9, "norm {} for {text:?}", v.norm());
            assert!(v.is_normalized());
        }
    }

    #[test]
    fn stub_rejects_empty_text_and_tiny_dim() {
        assert!(matches!(stub_embed(1, 8, "").unwrap_err(), ProviderError::EmptyText));
        assert!(matches!(stub_embed(1, 1, "abc").unwrap_err(), ProviderError::DimTooSmall(1)));
    }

    #[test]
    fn stub_seed_changes_embedding() {
        let a = stub_embed(1, 32, "some text here").unwrap();
        let b = stub_embed(2, 32, "some text here").unwrap();
        assert_ne!(a.values(), b.values());
    }

    /// Unrelated long texts should be near-orthogonal. The 0.2 mean bound is
    /// the contract; the tighter bound is frozen from the first measurement
    /// of this hash at dim 64 as a regression guard.
    #[test]
    fn unrelated_texts_decorrelate() {
        let mut rng = seeded_rng(99);
        let mut random_text = |words: usize| -> String {
            (0..words)
                .map(|_| {
                    let len = rng.gen_range(3..9);
                    (0..len).map(|_| char::from(rng.gen_range(b'a'..=b'z'))).collect::<String>()
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut total = 0.0;
        let mut max_abs: f64 = 0.0;
        let pairs = 100;
        for _ in 0..pairs {
            let a = stub_embed(7, 64, &random_text(30)).unwrap();
            let b = stub_embed(7, 64, &random_text(30)).unwrap();
            let c = cosine(&a, &b).unwrap().0.abs();
            total += c;
            max_abs = max_abs.max(c);
        }
        let mean = total / pairs as f64;
        assert!(mean < 0.2, "mean |cosine| {mean}");
        assert!(max_abs < 0.5, "max |cosine| {max_abs}");
        // regression bound, frozen after first measurement
        assert!(mean < 0.12, "mean |cosine| drifted: {mean}");
    }
}
