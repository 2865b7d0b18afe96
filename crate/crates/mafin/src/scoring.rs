//! Relevance scorers and brute-force top-K retrieval.
//!
//! Six scorer kinds share one embedding interface:
//!
//! - `bb_only`       cosine of black-box embeddings
//! - `aug_only`      cosine of augmenting embeddings
//! - `mafin`         concat(bb, aug)/sqrt(2); cosine equals the average of
//!                   the two component dot products
//! - `lambda_mafin`  concat(bb, raw aug)/sqrt(1 + ||raw||^2); the raw norm
//!                   acts as an input-dependent weight between the two dots
//! - `concat_frozen` mafin arithmetic over untrained (or separately trained)
//!                   augmenting weights
//! - `linear_transform`  cosine of W . bb (optionally low-rank W_l W_r^T)
//!
//! Scores are only comparable within a single ranking, never across kinds.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::augment::{
    encode_features_mode, featurize, AugmentingModel, EncodeMode, FeatureHasher, ModelError,
};
use crate::ingest::Corpus;
use crate::provider::{BlackBoxProvider, ProviderError};
use crate::rng::{seeded_rng, standard_normal};
use crate::vector::{cosine, DocId, EmbeddingVector, QueryId, RelevanceScore, VectorError};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("scorer `{kind}` requires {what}")]
    MissingComponent { kind: ScorerKind, what: &'static str },
    #[error("linear transform expects dimension {expected}, got {got}")]
    TransformDimMismatch { expected: usize, got: usize },
    #[error("linear transform collapsed the embedding to zero (information loss)")]
    TransformCollapse,
    #[error("cannot retrieve from an empty corpus")]
    EmptyCorpus,
    #[error("top-K must be >= 1")]
    ZeroK,
    #[error("ranked list file {path}:{line}: {message}")]
    RankedListFormat { path: String, line: usize, message: String },
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    BbOnly,
    AugOnly,
    Mafin,
    LambdaMafin,
    ConcatFrozen,
    LinearTransform,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 6] = [
        ScorerKind::BbOnly,
        ScorerKind::AugOnly,
        ScorerKind::Mafin,
        ScorerKind::LambdaMafin,
        ScorerKind::ConcatFrozen,
        ScorerKind::LinearTransform,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScorerKind::BbOnly => "bb_only",
            ScorerKind::AugOnly => "aug_only",
            ScorerKind::Mafin => "mafin",
            ScorerKind::LambdaMafin => "lambda_mafin",
            ScorerKind::ConcatFrozen => "concat_frozen",
            ScorerKind::LinearTransform => "linear_transform",
        }
    }
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScorerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ScorerKind::ALL
            .iter()
            .find(|k| k.as_str() == s)
            .copied()
            .ok_or_else(|| {
                let valid: Vec<&str> = ScorerKind::ALL.iter().map(|k| k.as_str()).collect();
                format!("unknown scorer `{s}` (valid: {})", valid.join(", "))
            })
    }
}

/// Learnable linear map over the black-box embedding, full or low-rank.
/// Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearTransform {
    Full { dim: usize, weights: Vec<f64> },
    LowRank { dim: usize, rank: usize, left: Vec<f64>, right: Vec<f64> },
}

/// Scale of the near-identity initialization noise.
pub const TRANSFORM_INIT_NOISE: f64 = 1e-3;

impl LinearTransform {
    /// W = I + eps * N(0,1): starts close to the identity so the original
    /// embedding information is preserved at initialization.
    pub fn near_identity(dim: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut weights = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                let noise = TRANSFORM_INIT_NOISE * standard_normal(&mut rng);
                weights[r * dim + c] = noise + if r == c { 1.0 } else { 0.0 };
            }
        }
        LinearTransform::Full { dim, weights }
    }

    /// W_l = W_r = [I_R; 0] + eps * N(0,1), so W_l W_r^T is close to a
    /// rank-R identity.
    pub fn near_identity_low_rank(dim: usize, rank: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut init = |offset: u64| {
            let _ = offset;
            let mut m = vec![0.0; dim * rank];
            for r in 0..dim {
                for c in 0..rank {
                    let noise = TRANSFORM_INIT_NOISE * standard_normal(&mut rng);
                    m[r * rank + c] = noise + if r == c { 1.0 } else { 0.0 };
                }
            }
            m
        };
        let left = init(0);
        let right = init(1);
        LinearTransform::LowRank { dim, rank, left, right }
    }

    pub fn dim(&self) -> usize {
        match self {
            LinearTransform::Full { dim, .. } | LinearTransform::LowRank { dim, .. } => *dim,
        }
    }

    /// Apply W (or W_l W_r^T, without materializing the product) to a raw
    /// input vector.
    pub fn apply_raw(&self, input: &[f64]) -> Result<Vec<f64>, ScoreError> {
        if input.len() != self.dim() {
            return Err(ScoreError::TransformDimMismatch {
                expected: self.dim(),
                got: input.len(),
            });
        }
        match self {
            LinearTransform::Full { dim, weights } => {
                let mut out = vec![0.0; *dim];
                for (r, o) in out.iter_mut().enumerate() {
                    let row = &weights[r * dim..(r + 1) * dim];
                    *o = row.iter().zip(input).map(|(w, x)| w * x).sum();
                }
                Ok(out)
            }
            LinearTransform::LowRank { dim, rank, left, right } => {
                // projected = W_r^T x (length R), out = W_l projected
                let mut projected = vec![0.0; *rank];
                for (r, &x) in input.iter().enumerate() {
                    let row = &right[r * rank..(r + 1) * rank];
                    for (p, w) in projected.iter_mut().zip(row) {
                        *p += w * x;
                    }
                }
                let mut out = vec![0.0; *dim];
                for (r, o) in out.iter_mut().enumerate() {
                    let row = &left[r * rank..(r + 1) * rank];
                    *o = row.iter().zip(&projected).map(|(w, p)| w * p).sum();
                }
                Ok(out)
            }
        }
    }
}

/// Transform then re-normalize (cosine divides by norms anyway; explicit
/// normalization keeps the normalized-flag invariant). A collapsed (zero)
/// output is an error, not a silent degenerate ranking.
pub fn linear_transform_embed(
    transform: &LinearTransform,
    bb: &EmbeddingVector,
) -> Result<EmbeddingVector, ScoreError> {
    let raw = transform.apply_raw(bb.values())?;
    let v = EmbeddingVector::new(raw)?;
    if v.norm() == 0.0 {
        return Err(ScoreError::TransformCollapse);
    }
    Ok(crate::vector::l2_normalize(&v)?)
}

/// concat(bb, aug)/sqrt(2). Both inputs must be unit-norm; the output is too.
pub fn mafin_embed(
    bb: &EmbeddingVector,
    aug: &EmbeddingVector,
) -> Result<EmbeddingVector, VectorError> {
    let inv = 1.0 / 2f64.sqrt();
    let values: Vec<f64> =
        bb.values().iter().chain(aug.values()).map(|v| v * inv).collect();
    EmbeddingVector::new(values)
}

/// concat(bb, raw aug)/sqrt(1 + ||raw||^2). With a unit bb the output is
/// unit-norm; the raw norm becomes the implicit weight between the two dots.
pub fn lambda_mafin_embed(
    bb: &EmbeddingVector,
    aug_raw: &EmbeddingVector,
) -> Result<EmbeddingVector, VectorError> {
    let a = aug_raw.norm();
    let inv = 1.0 / (1.0 + a * a).sqrt();
    let values: Vec<f64> =
        bb.values().iter().chain(aug_raw.values()).map(|v| v * inv).collect();
    EmbeddingVector::new(values)
}

/// The analytic pairwise weights implied by the self-normalization:
/// lambda_1 = 1/sqrt((1+a^2)(1+b^2)), lambda_2 = ab/sqrt((1+a^2)(1+b^2)).
pub fn lambda_weights(a: f64, b: f64) -> (f64, f64) {
    let denom = ((1.0 + a * a) * (1.0 + b * b)).sqrt();
    (1.0 / denom, a * b / denom)
}

/// A scoring configuration: a kind plus borrowed components. Construction
/// verifies the kind's required components are present.
pub struct Scorer<'a> {
    kind: ScorerKind,
    provider: &'a dyn BlackBoxProvider,
    augmenting: Option<(&'a AugmentingModel, &'a FeatureHasher)>,
    transform: Option<&'a LinearTransform>,
    include_titles: bool,
}

impl<'a> Scorer<'a> {
    pub fn new(
        kind: ScorerKind,
        provider: &'a dyn BlackBoxProvider,
        augmenting: Option<(&'a AugmentingModel, &'a FeatureHasher)>,
        transform: Option<&'a LinearTransform>,
    ) -> Result<Self, ScoreError> {
        match kind {
            ScorerKind::BbOnly => {}
            ScorerKind::AugOnly | ScorerKind::Mafin | ScorerKind::LambdaMafin
            | ScorerKind::ConcatFrozen => {
                if augmenting.is_none() {
                    return Err(ScoreError::MissingComponent {
                        kind,
                        what: "an augmenting model",
                    });
                }
            }
            ScorerKind::LinearTransform => {
                if transform.is_none() {
                    return Err(ScoreError::MissingComponent {
                        kind,
                        what: "transform parameters",
                    });
                }
            }
        }
        Ok(Self { kind, provider, augmenting, transform, include_titles: true })
    }

    pub fn with_include_titles(mut self, include_titles: bool) -> Self {
        self.include_titles = include_titles;
        self
    }

    pub fn kind(&self) -> ScorerKind {
        self.kind
    }

    pub fn include_titles(&self) -> bool {
        self.include_titles
    }

    fn augmenting(&self) -> (&AugmentingModel, &FeatureHasher) {
        self.augmenting.expect("checked at construction")
    }

    /// Augmenting embedding in the mode the kind requires, regardless of the
    /// model's own default mode.
    fn aug_embed(&self, text: &str, mode: EncodeMode) -> Result<EmbeddingVector, ScoreError> {
        let (model, hasher) = self.augmenting();
        let features = featurize(hasher, text)?;
        Ok(encode_features_mode(model, &features, mode)?)
    }

    /// Embed a text under this scorer's geometry. Scores are cosines of
    /// these embeddings, so `score(q, x) == score(x, q)` by construction.
    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, ScoreError> {
        let kind = self.kind;
        match kind {
            ScorerKind::BbOnly => Ok(self.provider.embed_one(text)?),
            ScorerKind::AugOnly => self.aug_embed(text, EncodeMode::Normalized),
            ScorerKind::Mafin | ScorerKind::ConcatFrozen => {
                let bb = self.provider.embed_one(text)?;
                let aug = self.aug_embed(text, EncodeMode::Normalized)?;
                Ok(mafin_embed(&bb, &aug)?)
            }
            ScorerKind::LambdaMafin => {
                let bb = self.provider.embed_one(text)?;
                let aug_raw = self.aug_embed(text, EncodeMode::Unnormalized)?;
                Ok(lambda_mafin_embed(&bb, &aug_raw)?)
            }
            ScorerKind::LinearTransform => {
                let bb = self.provider.embed_one(text)?;
                let transform = self.transform.expect("checked at construction");
                linear_transform_embed(transform, &bb)
            }
        }
    }

    pub fn score(&self, query_text: &str, passage_text: &str) -> Result<RelevanceScore, ScoreError> {
        let q = self.embed(query_text)?;
        let x = self.embed(passage_text)?;
        Ok(cosine(&q, &x)?)
    }

    /// Embed every passage once; retrieval and evaluation share the result.
    pub fn index_corpus(&self, corpus: &Corpus) -> Result<CorpusIndex, ScoreError> {
        let mut ids = Vec::with_capacity(corpus.len());
        let mut vectors = Vec::with_capacity(corpus.len());
        for passage in corpus.iter() {
            ids.push(passage.id.clone());
            vectors.push(self.embed(&passage.embedding_text(self.include_titles))?);
        }
        Ok(CorpusIndex { ids, vectors })
    }

    /// Exact brute-force top-K: score every passage, keep K via a bounded
    /// heap. Ties break by ascending doc id.
    pub fn retrieve_topk(
        &self,
        index: &CorpusIndex,
        query_id: &QueryId,
        query_text: &str,
        k: usize,
    ) -> Result<RankedList, ScoreError> {
        if k == 0 {
            return Err(ScoreError::ZeroK);
        }
        if index.ids.is_empty() {
            return Err(ScoreError::EmptyCorpus);
        }
        let query = self.embed(query_text)?;

        // Min-heap of the current keep set, worst candidate on top.
        let mut heap: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::with_capacity(k + 1);
        for (id, vector) in index.ids.iter().zip(&index.vectors) {
            let score = cosine(&query, vector)?.0;
            let candidate = Candidate { score, doc: id.clone() };
            if heap.len() < k {
                heap.push(std::cmp::Reverse(candidate));
            } else if candidate > heap.peek().expect("non-empty").0 {
                heap.pop();
                heap.push(std::cmp::Reverse(candidate));
            }
        }
        let mut kept: Vec<Candidate> = heap.into_iter().map(|r| r.0).collect();
        kept.sort_by(|a, b| b.cmp(a));
        Ok(RankedList {
            query_id: query_id.clone(),
            entries: kept
                .into_iter()
                .map(|c| (c.doc, RelevanceScore(c.score)))
                .collect(),
        })
    }
}

/// Ranking order: higher score wins; equal scores go to the smaller doc id.
#[derive(Debug, Clone, PartialEq)]
struct Candidate {
    score: f64,
    doc: DocId,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.doc.cmp(&self.doc))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Per-scorer embeddings of a corpus, in corpus order.
pub struct CorpusIndex {
    pub ids: Vec<DocId>,
    pub vectors: Vec<EmbeddingVector>,
}

/// Retrieval result: (doc, score) pairs, scores non-increasing, doc-id
/// tie-broken.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: QueryId,
    pub entries: Vec<(DocId, RelevanceScore)>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Write ranked lists as TSV: `query-id\tdoc-id\trank\tscore`. Scores use
/// the shortest round-trip decimal form, so a reload is exact.
pub fn save_ranked_lists(path: &Path, lists: &[RankedList]) -> Result<(), ScoreError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_ranked_lists(&mut out, lists)?;
    out.flush()?;
    Ok(())
}

pub fn write_ranked_lists(out: &mut impl Write, lists: &[RankedList]) -> Result<(), ScoreError> {
    for list in lists {
        for (rank, (doc, score)) in list.entries.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}", list.query_id, doc, rank + 1, score.0)?;
        }
    }
    Ok(())
}

pub fn load_ranked_lists(path: &Path) -> Result<Vec<RankedList>, ScoreError> {
    let file = File::open(path)?;
    let err = |line: usize, message: String| ScoreError::RankedListFormat {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut lists: Vec<RankedList> = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(err(line_no, format!("expected 4 columns, got {}", cols.len())));
        }
        let query_id =
            QueryId::new(cols[0]).map_err(|e| err(line_no, e.to_string()))?;
        let doc = DocId::new(cols[1]).map_err(|e| err(line_no, e.to_string()))?;
        let rank: usize = cols[2].parse().map_err(|_| err(line_no, "bad rank".into()))?;
        let score: f64 = cols[3].parse().map_err(|_| err(line_no, "bad score".into()))?;
        let current = match lists.last_mut() {
            Some(l) if l.query_id == query_id => l,
            _ => {
                lists.push(RankedList { query_id, entries: Vec::new() });
                lists.last_mut().expect("just pushed")
            }
        };
        if rank != current.entries.len() + 1 {
            return Err(err(line_no, format!("rank {rank} out of sequence")));
        }
        current.entries.push((doc, RelevanceScore(score)));
    }
    Ok(lists)
}
