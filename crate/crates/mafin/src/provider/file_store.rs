//! Provider backed by a file of precomputed embeddings.
//!
//! The store uses the same MAFC layout as the cache, keyed by the usual
//! (identity, text) hash, so a filled cache doubles as a store. Texts absent
//! from the file are an error: this provider never fabricates vectors.

use std::collections::HashMap;
use std::path::Path;

use crate::provider::cache::read_mafc;
use crate::provider::{hex32, reject_bad_batch, text_key, BlackBoxProvider, ProviderError};
use crate::vector::{l2_normalize, EmbeddingVector};

pub struct FileStoreProvider {
    identity: String,
    dim: usize,
    entries: HashMap<[u8; 32], EmbeddingVector>,
}

impl FileStoreProvider {
    pub fn open(path: &Path) -> Result<Self, ProviderError> {
        let contents = read_mafc(path)?;
        let mut entries = HashMap::with_capacity(contents.entries.len());
        for (key, values) in contents.entries {
            let vector = EmbeddingVector::new(values)?;
            // Provider contract: unit-norm outputs. Stored vectors should
            // already be normalized; repair with a warning if not.
            let vector = if vector.is_normalized() {
                vector
            } else {
                log::warn!(
                    "{}: entry {} has norm {}; normalizing",
                    path.display(),
                    hex32(&key),
                    vector.norm()
                );
                l2_normalize(&vector)?
            };
            entries.insert(key, vector);
        }
        Ok(Self { identity: contents.identity, dim: contents.dim, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl BlackBoxProvider for FileStoreProvider {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn identity(&self) -> &str {
        &self.identity
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        reject_bad_batch(texts, self.max_batch())?;
        texts
            .iter()
            .map(|t| {
                let key = text_key(&self.identity, t);
                self.entries
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| ProviderError::MissingPrecomputed { hash: hex32(&key) })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Corpus, Passage, QuerySet};
    use crate::provider::{cache_fill, StubProvider};
    use crate::vector::DocId;

    #[test]
    fn filled_cache_serves_as_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.mafc");
        let provider = StubProvider::new(11, 8).unwrap();
        let corpus = Corpus::from_passages(vec![Passage {
            id: DocId::new("d1").unwrap(),
            title: String::new(),
            text: "stored passage".into(),
        }])
        .unwrap();
        cache_fill(&provider, &corpus, &QuerySet::default(), &path, true).unwrap();

        let store = FileStoreProvider::open(&path).unwrap();
        assert_eq!(store.identity(), provider.identity());
        let from_store = store.embed_one("stored passage").unwrap();
        let direct = provider.embed_one("stored passage").unwrap();
        assert_eq!(from_store.values(), direct.values());
    }

    #[test]
    fn missing_text_names_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.mafc");
        let provider = StubProvider::new(11, 8).unwrap();
        cache_fill(&provider, &Corpus::default(), &QuerySet::default(), &path, true).unwrap();
        let store = FileStoreProvider::open(&path).unwrap();
        match store.embed_one("never stored").unwrap_err() {
            ProviderError::MissingPrecomputed { hash } => assert_eq!(hash.len(), 64),
            other => panic!("unexpected error {other}"),
        }
    }
}
