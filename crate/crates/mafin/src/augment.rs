//! The trainable augmenting encoder.
//!
//! Text is feature-hashed (signed counts over character 3/4/5-grams plus
//! word unigrams, scaled by 1/sqrt(nnz)) and pushed through a single linear
//! map. No nonlinearity: gradients are exact and closed-form, including the
//! Jacobian of L2 normalization in normalized mode. Checkpoints are binary
//! (`MAFW`) with a trailing CRC32.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::rng::{hash64, seeded_rng};
use crate::vector::{l2_normalize, EmbeddingVector, VectorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot featurize empty text")]
    EmptyText,
    #[error("feature dimension must be a power of two >= 2, got {0}")]
    BadFeatureDim(usize),
    #[error("augmenting dimension must be >= 1")]
    BadAugDim,
    #[error("encoder produced a non-finite value (exploded weights?)")]
    NonFinite,
    #[error("checkpoint {path}: {message}")]
    CheckpointFormat { path: String, message: String },
    #[error("checkpoint {path}: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CheckpointCrc { path: String, stored: u32, computed: u32 },
    #[error("checkpoint {path}: unsupported version {version}")]
    CheckpointVersion { path: String, version: u32 },
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Character n-gram sizes hashed alongside word unigrams.
pub const CHAR_NGRAM_SIZES: [usize; 3] = [3, 4, 5];

/// Deterministic signed feature hasher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHasher {
    feature_dim: usize,
    seed: u64,
}

impl FeatureHasher {
    /// `feature_dim` must be a power of two (index = hash & (F-1)).
    pub fn new(feature_dim: usize, seed: u64) -> Result<Self, ModelError> {
        if feature_dim < 2 || !feature_dim.is_power_of_two() {
            return Err(ModelError::BadFeatureDim(feature_dim));
        }
        Ok(Self { feature_dim, seed })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Hash one feature string under a namespace tag; returns (index, sign).
    fn slot(&self, tag: &[u8], feature: &str) -> (u32, f64) {
        let h = hash64(self.seed, &[tag, feature.as_bytes()]);
        let idx = (h & (self.feature_dim as u64 - 1)) as u32;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        (idx, sign)
    }
}

/// Sparse feature vector: (index, value) pairs sorted by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseFeatures {
    entries: Vec<(u32, f64)>,
}

impl SparseFeatures {
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

/// Hash a text into signed counts, then scale by 1/sqrt(nnz) so feature
/// magnitude stays comparable across text lengths (the augmenting norm must
/// reflect learned confidence, not passage length).
pub fn featurize(hasher: &FeatureHasher, text: &str) -> Result<SparseFeatures, ModelError> {
    if text.is_empty() {
        return Err(ModelError::EmptyText);
    }
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    let mut bump = |(idx, sign): (u32, f64)| {
        *counts.entry(idx).or_insert(0.0) += sign;
    };

    for word in text.split_whitespace() {
        bump(hasher.slot(b"w", word));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut gram = String::with_capacity(24);
    for n in CHAR_NGRAM_SIZES {
        if chars.len() < n {
            continue;
        }
        let tag = [b'c', b'0' + n as u8];
        for window in chars.windows(n) {
            gram.clear();
            gram.extend(window.iter());
            bump(hasher.slot(&tag, &gram));
        }
    }

    // Signed hashing can cancel an index to exactly zero; drop those.
    let mut entries: Vec<(u32, f64)> = counts.into_iter().filter(|(_, v)| *v != 0.0).collect();
    if !entries.is_empty() {
        let scale = 1.0 / (entries.len() as f64).sqrt();
        for (_, v) in entries.iter_mut() {
            *v *= scale;
        }
    }
    Ok(SparseFeatures { entries })
}

/// Whether the encoder emits unit-norm embeddings or raw ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Self-normalized output; zero raw vectors fall back to (1, 0, ..., 0).
    Normalized,
    /// Raw output with its true norm (the norm is the learned weight).
    Unnormalized,
}

/// The augmenting linear map. Weights are stored feature-major
/// (`weights[f * aug_dim + r]`) so each active feature's column is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentingModel {
    weights: Vec<f64>,
    feature_dim: usize,
    aug_dim: usize,
    pub mode: EncodeMode,
}

impl AugmentingModel {
    /// Fresh model with i.i.d. uniform weights in [-1/sqrt(F), 1/sqrt(F)].
    pub fn init(
        feature_dim: usize,
        aug_dim: usize,
        mode: EncodeMode,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if feature_dim < 2 || !feature_dim.is_power_of_two() {
            return Err(ModelError::BadFeatureDim(feature_dim));
        }
        if aug_dim == 0 {
            return Err(ModelError::BadAugDim);
        }
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let mut rng = seeded_rng(seed);
        let weights =
            (0..feature_dim * aug_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(Self { weights, feature_dim, aug_dim, mode })
    }

    pub fn zeros(
        feature_dim: usize,
        aug_dim: usize,
        mode: EncodeMode,
    ) -> Result<Self, ModelError> {
        if feature_dim < 2 || !feature_dim.is_power_of_two() {
            return Err(ModelError::BadFeatureDim(feature_dim));
        }
        if aug_dim == 0 {
            return Err(ModelError::BadAugDim);
        }
        Ok(Self { weights: vec![0.0; feature_dim * aug_dim], feature_dim, aug_dim, mode })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn aug_dim(&self) -> usize {
        self.aug_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Flat offset of (row, feature) in the weight vector.
    pub fn flat_index(&self, row: u32, feature: u32) -> usize {
        feature as usize * self.aug_dim + row as usize
    }

    /// Raw (pre-normalization) embedding of a featurized text.
    pub fn raw_embed(&self, features: &SparseFeatures) -> Vec<f64> {
        let mut out = vec![0.0f64; self.aug_dim];
        for &(f, v) in features.entries() {
            let col = &self.weights[f as usize * self.aug_dim..(f as usize + 1) * self.aug_dim];
            for (o, w) in out.iter_mut().zip(col) {
                *o += w * v;
            }
        }
        out
    }
}

/// Encode a text under the model's mode.
pub fn encode(
    model: &AugmentingModel,
    hasher: &FeatureHasher,
    text: &str,
) -> Result<EmbeddingVector, ModelError> {
    let features = featurize(hasher, text)?;
    encode_features(model, &features)
}

pub fn encode_features(
    model: &AugmentingModel,
    features: &SparseFeatures,
) -> Result<EmbeddingVector, ModelError> {
    encode_features_mode(model, features, model.mode)
}

/// Encode under an explicit mode, regardless of the model's default.
pub fn encode_features_mode(
    model: &AugmentingModel,
    features: &SparseFeatures,
    mode: EncodeMode,
) -> Result<EmbeddingVector, ModelError> {
    let raw = model.raw_embed(features);
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    match mode {
        EncodeMode::Unnormalized => Ok(EmbeddingVector::new(raw)?),
        EncodeMode::Normalized => {
            let v = EmbeddingVector::new(raw)?;
            if v.norm() == 0.0 {
                log::debug!("zero raw augmenting embedding; emitting fallback basis vector");
                let mut fallback = vec![0.0; model.aug_dim];
                fallback[0] = 1.0;
                Ok(EmbeddingVector::new(fallback)?)
            } else {
                Ok(l2_normalize(&v)?)
            }
        }
    }
}

/// Accumulated loss gradient keyed by (row, feature). BTreeMap keeps the
/// application order deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientBuffer {
    entries: BTreeMap<(u32, u32), f64>,
}

impl GradientBuffer {
    pub fn accumulate(&mut self, row: u32, feature: u32, value: f64) {
        if value != 0.0 {
            *self.entries.entry((row, feature)).or_insert(0.0) += value;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(u32, u32), &f64)> {
        self.entries.iter()
    }

    pub fn get(&self, row: u32, feature: u32) -> f64 {
        self.entries.get(&(row, feature)).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Accumulate the exact gradient of `upstream . emitted(text)` w.r.t. the
/// weights. `upstream` is the loss gradient at the emitted embedding.
///
/// Normalized mode applies the normalization Jacobian
/// (I - v_hat v_hat^T) / ||v||; a zero raw vector contributes zero gradient,
/// matching the fallback embedding's independence from the weights.
pub fn encode_backward(
    model: &AugmentingModel,
    hasher: &FeatureHasher,
    text: &str,
    upstream: &[f64],
    buffer: &mut GradientBuffer,
) -> Result<(), ModelError> {
    let features = featurize(hasher, text)?;
    encode_backward_features(model, &features, upstream, buffer);
    Ok(())
}

pub fn encode_backward_features(
    model: &AugmentingModel,
    features: &SparseFeatures,
    upstream: &[f64],
    buffer: &mut GradientBuffer,
) {
    encode_backward_features_mode(model, features, upstream, model.mode, buffer);
}

/// Backward pass under an explicit mode, regardless of the model's default.
pub fn encode_backward_features_mode(
    model: &AugmentingModel,
    features: &SparseFeatures,
    upstream: &[f64],
    mode: EncodeMode,
    buffer: &mut GradientBuffer,
) {
    debug_assert_eq!(upstream.len(), model.aug_dim);
    match mode {
        EncodeMode::Unnormalized => accumulate_linear(features, upstream, buffer),
        EncodeMode::Normalized => {
            let raw = model.raw_embed(features);
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return;
            }
            let unit: Vec<f64> = raw.iter().map(|v| v / norm).collect();
            let along = unit.iter().zip(upstream).map(|(u, g)| u * g).sum::<f64>();
            let projected: Vec<f64> =
                upstream.iter().zip(&unit).map(|(g, u)| (g - along * u) / norm).collect();
            accumulate_linear(features, &projected, buffer);
        }
    }
}

fn accumulate_linear(features: &SparseFeatures, upstream: &[f64], buffer: &mut GradientBuffer) {
    for &(f, v) in features.entries() {
        for (r, g) in upstream.iter().enumerate() {
            buffer.accumulate(r as u32, f, g * v);
        }
    }
}

const MAGIC: &[u8; 4] = b"MAFW";
const VERSION: u32 = 1;

/// Write a checkpoint: magic `MAFW`, version, F, d_aug, mode byte, hasher
/// seed, the dense weights (feature-major, f64 LE), then CRC32 of everything
/// preceding it.
pub fn save_model(
    path: &Path,
    model: &AugmentingModel,
    hasher: &FeatureHasher,
) -> Result<(), ModelError> {
    let mut payload =
        Vec::with_capacity(4 + 4 + 4 + 4 + 1 + 8 + model.weights.len() * 8);
    payload.extend_from_slice(MAGIC);
    payload.extend_from_slice(&VERSION.to_le_bytes());
    payload.extend_from_slice(&(model.feature_dim as u32).to_le_bytes());
    payload.extend_from_slice(&(model.aug_dim as u32).to_le_bytes());
    payload.push(match model.mode {
        EncodeMode::Normalized => 0,
        EncodeMode::Unnormalized => 1,
    });
    payload.extend_from_slice(&hasher.seed().to_le_bytes());
    for w in &model.weights {
        payload.extend_from_slice(&w.to_le_bytes());
    }
    let crc = crc32fast::hash(&payload);
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&payload)?;
    out.write_all(&crc.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

/// Load a checkpoint, validating magic, version and CRC. Returns the model
/// together with the hasher it was trained with.
pub fn load_model(path: &Path) -> Result<(AugmentingModel, FeatureHasher), ModelError> {
    let format_err = |message: &str| ModelError::CheckpointFormat {
        path: path.display().to_string(),
        message: message.to_string(),
    };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 4 + 4 + 4 + 1 + 8 + 4 {
        return Err(format_err("file too short"));
    }
    let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(ModelError::CheckpointCrc {
            path: path.display().to_string(),
            stored,
            computed,
        });
    }
    if &payload[0..4] != MAGIC {
        return Err(format_err("bad magic (not a MAFW checkpoint)"));
    }
    let version = u32::from_le_bytes(payload[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ModelError::CheckpointVersion {
            path: path.display().to_string(),
            version,
        });
    }
    let feature_dim = u32::from_le_bytes(payload[8..12].try_into().expect("4 bytes")) as usize;
    let aug_dim = u32::from_le_bytes(payload[12..16].try_into().expect("4 bytes")) as usize;
    let mode = match payload[16] {
        0 => EncodeMode::Normalized,
        1 => EncodeMode::Unnormalized,
        other => return Err(format_err(&format!("unknown mode byte {other}"))),
    };
    let hasher_seed = u64::from_le_bytes(payload[17..25].try_into().expect("8 bytes"));
    let body = &payload[25..];
    let expected = feature_dim
        .checked_mul(aug_dim)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| format_err("dimension overflow"))?;
    if body.len() != expected {
        return Err(format_err(&format!(
            "weight payload is {} bytes, expected {expected}",
            body.len()
        )));
    }
    let weights: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(format_err("non-finite weight"));
    }
    let hasher = FeatureHasher::new(feature_dim, hasher_seed)?;
    Ok((AugmentingModel { weights, feature_dim, aug_dim, mode }, hasher))
}
