//! Probabilistic ranking losses and their exact gradients.
//!
//! Three members of one family:
//!
//! - `pl_full`  KL between two Plackett-Luce permutation distributions,
//!              enumerated explicitly (K <= 8; oracle and small-list use)
//! - `top1_kl`  KL between the top-1 marginals: softmax targets built from
//!              labels at temperature tau, optionally label-smoothed
//! - `infonce`  the tau -> 0 limit: -log softmax(scores)[argmax label]
//!
//! All losses are cross-entropy forms; the constant target entropy is
//! omitted throughout (it does not affect gradients). Softmaxes are
//! log-sum-exp stabilized so integer labels at tau = 1e-6 do not overflow.
//!
//! `loss_backward` chains d loss / d score through whichever trainable
//! scorer produced the scores (augmenting encoder or linear transform);
//! black-box embeddings are constants.

use thiserror::Error;

use crate::augment::{
    encode_backward_features_mode, encode_features_mode, AugmentingModel, EncodeMode,
    FeatureHasher, GradientBuffer, ModelError, SparseFeatures,
};
use crate::ingest::{Corpus, Qrels};
use crate::provider::{embed_all, BlackBoxProvider, ProviderError};
use crate::scoring::{LinearTransform, ScoreError, ScorerKind};
use crate::vector::{dot, DocId, EmbeddingVector, QueryId};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Explicit permutation enumeration is capped here.
pub const MAX_ENUMERATED_K: usize = 8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("list size {got} exceeds {MAX_ENUMERATED_K}; use top1_kl for large lists")]
    ListTooLarge { got: usize },
    #[error("a candidate list needs at least 2 entries, got {0}")]
    ListTooSmall(usize),
    #[error("labels and scores disagree in length: {labels} vs {scores}")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("permutation is not a bijection on 0..{k}")]
    BadPermutation { k: usize },
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error("label smoothing must lie in [0, 0.5], got {0}")]
    BadSmoothing(f64),
    #[error("target distribution sums to {0}, not 1")]
    TargetNotNormalized(f64),
    #[error("positive index {index} out of range for {len} candidates")]
    BadPositiveIndex { index: usize, len: usize },
    #[error("query `{0}` has no positive passage")]
    NoPositive(QueryId),
    #[error("corpus of {corpus} passages cannot fill candidate lists of size {m}")]
    CorpusTooSmall { m: usize, corpus: usize },
    #[error("negatives M must be >= 2, got {0}")]
    BadNegatives(usize),
    #[error("scorer `{0}` has no trainable parameters")]
    NotTrainable(ScorerKind),
    #[error("loss produced a non-finite value")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// log softmax with max-shift stabilization.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    log_softmax(scores).into_iter().map(f64::exp).collect()
}

/// Lowest-index argmax (the documented tie-break for `k_max`).
pub fn argmax_label(labels: &[u32]) -> usize {
    let mut best = 0;
    for (i, &l) in labels.iter().enumerate() {
        if l > labels[best] {
            best = i;
        }
    }
    best
}

fn check_k(k: usize) -> Result<(), LossError> {
    if k < 2 {
        return Err(LossError::ListTooSmall(k));
    }
    if k > MAX_ENUMERATED_K {
        return Err(LossError::ListTooLarge { got: k });
    }
    Ok(())
}

/// Run `f` over every permutation of `0..k` (Heap's algorithm). The slice
/// passed to `f` is the ranked item list: element 0 is the item at rank 1.
fn for_each_permutation(k: usize, mut f: impl FnMut(&[usize])) {
    let mut items: Vec<usize> = (0..k).collect();
    let mut counters = vec![0usize; k];
    f(&items);
    let mut i = 0;
    while i < k {
        if counters[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(counters[i], i);
            }
            f(&items);
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
}

/// log P(ranking) under the Plackett-Luce model with the given scores:
/// sum over ranks of (score at rank - LSE over the not-yet-ranked tail).
fn pl_log_prob(scores: &[f64], ranking: &[usize]) -> f64 {
    let mut log_prob = 0.0;
    for stage in 0..ranking.len() {
        let remaining: Vec<f64> = ranking[stage..].iter().map(|&i| scores[i]).collect();
        let max = remaining.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + remaining.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        log_prob += scores[ranking[stage]] - lse;
    }
    log_prob
}

/// Probability of one ranked list under the Plackett-Luce model. `ranking`
/// lists item indices from rank 1 downwards and must be a bijection on 0..K.
pub fn pl_prob(scores: &[f64], ranking: &[usize]) -> Result<f64, LossError> {
    let k = scores.len();
    check_k(k)?;
    if ranking.len() != k {
        return Err(LossError::BadPermutation { k });
    }
    let mut seen = vec![false; k];
    for &i in ranking {
        if i >= k || seen[i] {
            return Err(LossError::BadPermutation { k });
        }
        seen[i] = true;
    }
    Ok(pl_log_prob(scores, ranking).exp())
}

/// Cross-entropy between the label-derived Plackett-Luce distribution (at
/// temperature tau) and the score-derived one, enumerated over all K!
/// permutations. The target's constant entropy is omitted.
pub fn pl_kl_loss(labels: &[u32], scores: &[f64], tau: f64) -> Result<f64, LossError> {
    let k = scores.len();
    check_k(k)?;
    if labels.len() != k {
        return Err(LossError::LengthMismatch { labels: labels.len(), scores: k });
    }
    if !(tau > 0.0) {
        return Err(LossError::BadTemperature(tau));
    }
    let target_scores: Vec<f64> = labels.iter().map(|&y| f64::from(y) / tau).collect();
    let mut loss = 0.0;
    for_each_permutation(k, |ranking| {
        let weight = pl_log_prob(&target_scores, ranking).exp();
        loss -= weight * pl_log_prob(scores, ranking);
    });
    if !loss.is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok(loss)
}

/// d pl_kl_loss / d scores, by the same enumeration.
pub fn pl_kl_grad(labels: &[u32], scores: &[f64], tau: f64) -> Result<Vec<f64>, LossError> {
    let k = scores.len();
    check_k(k)?;
    if labels.len() != k {
        return Err(LossError::LengthMismatch { labels: labels.len(), scores: k });
    }
    if !(tau > 0.0) {
        return Err(LossError::BadTemperature(tau));
    }
    let target_scores: Vec<f64> = labels.iter().map(|&y| f64::from(y) / tau).collect();
    let mut grad = vec![0.0; k];
    for_each_permutation(k, |ranking| {
        let weight = pl_log_prob(&target_scores, ranking).exp();
        // d(-log p_theta)/ds_j = sum over stages of softmax(remaining)_j - [j chosen]
        for stage in 0..k {
            let remaining = &ranking[stage..];
            let vals: Vec<f64> = remaining.iter().map(|&i| scores[i]).collect();
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = vals.iter().map(|s| (s - max).exp()).sum();
            for (&item, val) in remaining.iter().zip(&vals) {
                grad[item] += weight * (val - max).exp() / denom;
            }
            grad[ranking[stage]] -= weight;
        }
    });
    Ok(grad)
}

/// Label-derived top-1 target: softmax(labels/tau), then uniform label
/// smoothing (1 - eps) p + eps/K.
pub fn top1_target(labels: &[u32], tau: f64, eps: f64) -> Result<Vec<f64>, LossError> {
    if labels.len() < 2 {
        return Err(LossError::ListTooSmall(labels.len()));
    }
    if !(tau > 0.0) {
        return Err(LossError::BadTemperature(tau));
    }
    if !(0.0..=0.5).contains(&eps) {
        return Err(LossError::BadSmoothing(eps));
    }
    let k = labels.len() as f64;
    let scaled: Vec<f64> = labels.iter().map(|&y| f64::from(y) / tau).collect();
    Ok(softmax(&scaled).into_iter().map(|p| (1.0 - eps) * p + eps / k).collect())
}

/// Cross-entropy -sum target_k log softmax(scores)_k.
pub fn top1_kl_loss(target: &[f64], scores: &[f64]) -> Result<f64, LossError> {
    if target.len() != scores.len() {
        return Err(LossError::LengthMismatch { labels: target.len(), scores: scores.len() });
    }
    if scores.len() < 2 {
        return Err(LossError::ListTooSmall(scores.len()));
    }
    let total: f64 = target.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(LossError::TargetNotNormalized(total));
    }
    let lsm = log_softmax(scores);
    let loss = -target.iter().zip(&lsm).map(|(t, l)| t * l).sum::<f64>();
    if !loss.is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok(loss)
}

/// d top1_kl_loss / d scores = softmax(scores) - target.
pub fn top1_kl_grad(target: &[f64], scores: &[f64]) -> Vec<f64> {
    softmax(scores).iter().zip(target).map(|(p, t)| p - t).collect()
}

/// -log softmax(scores)[positive]: the tau -> 0 limit of the top-1 KL, and
/// the InfoNCE contrastive loss over one positive and M - 1 negatives.
pub fn infonce_loss(positive: usize, scores: &[f64]) -> Result<f64, LossError> {
    if scores.len() < 2 {
        return Err(LossError::ListTooSmall(scores.len()));
    }
    if positive >= scores.len() {
        return Err(LossError::BadPositiveIndex { index: positive, len: scores.len() });
    }
    let loss = -log_softmax(scores)[positive];
    if !loss.is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok(loss)
}

pub fn infonce_grad(positive: usize, scores: &[f64]) -> Vec<f64> {
    let mut grad = softmax(scores);
    grad[positive] -= 1.0;
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    PlFull,
    Top1Kl,
    InfoNce,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pl_full" => Ok(LossKind::PlFull),
            "top1_kl" => Ok(LossKind::Top1Kl),
            "infonce" => Ok(LossKind::InfoNce),
            other => Err(format!("unknown loss `{other}` (valid: pl_full, top1_kl, infonce)")),
        }
    }
}

/// Which score the softmax consumes during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScoreMode {
    /// The full combined score (Mafin or lambda-Mafin); gradients flow only
    /// through the augmenting terms.
    CombinedMafin,
    /// The augmenting dot product alone (the "only fine-tune the small
    /// model" regime).
    AugOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Temperature for pl_full / top1_kl targets; infonce ignores it.
    pub temperature: f64,
    /// Label smoothing applied to the target distribution only.
    pub smoothing: f64,
    /// Candidate list size M (one positive + M - 1 sampled negatives).
    pub negatives: usize,
    pub train_score: TrainScoreMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::InfoNce,
            temperature: 1.0,
            smoothing: 0.0,
            negatives: 32,
            train_score: TrainScoreMode::CombinedMafin,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0) {
            return Err(LossError::BadTemperature(self.temperature));
        }
        if !(0.0..=0.5).contains(&self.smoothing) {
            return Err(LossError::BadSmoothing(self.smoothing));
        }
        if self.negatives < 2 {
            return Err(LossError::BadNegatives(self.negatives));
        }
        Ok(())
    }

    /// Loss of one candidate list given its integer labels.
    pub fn loss(&self, labels: &[u32], scores: &[f64]) -> Result<f64, LossError> {
        match self.kind {
            LossKind::PlFull => pl_kl_loss(labels, scores, self.temperature),
            LossKind::Top1Kl => {
                let target = top1_target(labels, self.temperature, self.smoothing)?;
                top1_kl_loss(&target, scores)
            }
            LossKind::InfoNce => infonce_loss(argmax_label(labels), scores),
        }
    }

    /// d loss / d scores for the same dispatch.
    pub fn grad(&self, labels: &[u32], scores: &[f64]) -> Result<Vec<f64>, LossError> {
        match self.kind {
            LossKind::PlFull => pl_kl_grad(labels, scores, self.temperature),
            LossKind::Top1Kl => {
                let target = top1_target(labels, self.temperature, self.smoothing)?;
                Ok(top1_kl_grad(&target, scores))
            }
            LossKind::InfoNce => Ok(infonce_grad(argmax_label(labels), scores)),
        }
    }
}

/// A query with a labeled candidate list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledList {
    pub query: QueryId,
    pub docs: Vec<DocId>,
    pub labels: Vec<u32>,
}

impl LabeledList {
    /// K >= 2 and at least one positive label; callers skip invalid lists
    /// with a warning rather than aborting a whole run.
    pub fn new(query: QueryId, docs: Vec<DocId>, labels: Vec<u32>) -> Result<Self, LossError> {
        if docs.len() != labels.len() {
            return Err(LossError::LengthMismatch { labels: labels.len(), scores: docs.len() });
        }
        if docs.len() < 2 {
            return Err(LossError::ListTooSmall(docs.len()));
        }
        if labels.iter().all(|&y| y == 0) {
            return Err(LossError::NoPositive(query));
        }
        Ok(Self { query, docs, labels })
    }
}

/// One positive plus M - 1 sampled negatives, shuffled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledCandidates {
    pub docs: Vec<DocId>,
    pub labels: Vec<u32>,
    /// Index of the positive inside `docs`.
    pub positive: usize,
}

/// Sample a candidate sub-list for a query: one positive chosen uniformly
/// among the query's highest-label passages, M - 1 negatives uniformly
/// without replacement from label-0 passages. Falls back to sampling with
/// replacement (with a warning) when too few negatives exist.
pub fn sample_negatives(
    query: &QueryId,
    qrels: &Qrels,
    corpus: &Corpus,
    m: usize,
    rng: &mut ChaCha20Rng,
) -> Result<SampledCandidates, LossError> {
    if m < 2 {
        return Err(LossError::BadNegatives(m));
    }
    if corpus.len() < m {
        return Err(LossError::CorpusTooSmall { m, corpus: corpus.len() });
    }
    let judged = qrels.docs_for(query);
    let max_label = judged
        .map(|docs| docs.values().copied().max().unwrap_or(0))
        .unwrap_or(0);
    if max_label == 0 {
        return Err(LossError::NoPositive(query.clone()));
    }
    let judged = judged.expect("max_label > 0 implies judged docs");

    // All positives at the max label, in deterministic (BTreeMap) order.
    let top: Vec<&DocId> =
        judged.iter().filter(|(_, &y)| y == max_label).map(|(d, _)| d).collect();
    let positive_doc = top[rng.gen_range(0..top.len())].clone();

    // Eligible negatives: corpus-order passages with label 0 for this query.
    let eligible: Vec<&DocId> = corpus
        .iter()
        .map(|p| &p.id)
        .filter(|d| qrels.relevance(query, d) == 0)
        .collect();

    let wanted = m - 1;
    let mut negatives: Vec<DocId> = Vec::with_capacity(wanted);
    if eligible.len() >= wanted {
        // partial Fisher-Yates: draw `wanted` without replacement
        let mut pool: Vec<&DocId> = eligible;
        for i in 0..wanted {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
            negatives.push(pool[i].clone());
        }
    } else {
        log::warn!(
            "query {query}: only {} label-0 passages for {wanted} negatives; sampling with replacement",
            eligible.len()
        );
        for _ in 0..wanted {
            negatives.push(eligible[rng.gen_range(0..eligible.len())].clone());
        }
    }

    let mut docs = Vec::with_capacity(m);
    docs.push(positive_doc.clone());
    docs.extend(negatives);
    crate::rng::shuffle(&mut docs, rng);
    let positive = docs.iter().position(|d| *d == positive_doc).expect("positive present");
    let labels: Vec<u32> =
        docs.iter().map(|d| if *d == positive_doc { max_label } else { 0 }).collect();
    Ok(SampledCandidates { docs, labels, positive })
}

/// The trainable side of a scorer, as the loss sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableScorer {
    AugOnly,
    Mafin,
    LambdaMafin,
    LinearTransform,
}

impl TrainableScorer {
    /// Resolve (scorer kind, train-score mode) into the score the softmax
    /// consumes. `AugOnly` mode trains the augmenting dot alone whatever the
    /// final scorer will be.
    pub fn resolve(kind: ScorerKind, mode: TrainScoreMode) -> Result<Self, LossError> {
        if kind == ScorerKind::BbOnly {
            return Err(LossError::NotTrainable(kind));
        }
        if kind == ScorerKind::LinearTransform {
            return Ok(TrainableScorer::LinearTransform);
        }
        if mode == TrainScoreMode::AugOnly {
            return Ok(TrainableScorer::AugOnly);
        }
        Ok(match kind {
            ScorerKind::AugOnly => TrainableScorer::AugOnly,
            ScorerKind::Mafin | ScorerKind::ConcatFrozen => TrainableScorer::Mafin,
            ScorerKind::LambdaMafin => TrainableScorer::LambdaMafin,
            ScorerKind::BbOnly | ScorerKind::LinearTransform => unreachable!("handled above"),
        })
    }
}

/// Everything fixed about one training step: the featurized query and
/// candidates plus the frozen black-box embeddings.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub labels: Vec<u32>,
    pub query_features: SparseFeatures,
    pub candidate_features: Vec<SparseFeatures>,
    pub bb_query: EmbeddingVector,
    pub bb_candidates: Vec<EmbeddingVector>,
    /// Precomputed bb_query . bb_candidate dots.
    pub bb_dots: Vec<f64>,
}

impl TrainBatch {
    /// Featurize and embed one labeled list. Texts come from the corpus;
    /// the black-box side goes through the provider (and thus its cache).
    pub fn build(
        list: &LabeledList,
        query_text: &str,
        corpus: &Corpus,
        include_titles: bool,
        hasher: &FeatureHasher,
        provider: &dyn BlackBoxProvider,
    ) -> Result<Self, LossError> {
        let texts: Vec<String> = list
            .docs
            .iter()
            .map(|d| {
                corpus
                    .get(d)
                    .map(|p| p.embedding_text(include_titles))
                    .ok_or_else(|| ScoreError::RankedListFormat {
                        path: String::new(),
                        line: 0,
                        message: format!("doc `{d}` not in corpus"),
                    })
            })
            .collect::<Result<_, _>>()?;
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let bb_candidates = embed_all(provider, &refs)?;
        let bb_query = provider.embed_one(query_text)?;
        let bb_dots = bb_candidates
            .iter()
            .map(|c| dot(&bb_query, c))
            .collect::<Result<Vec<f64>, _>>()
            .map_err(ModelError::from)?;
        let query_features = crate::augment::featurize(hasher, query_text)?;
        let candidate_features = refs
            .iter()
            .map(|t| crate::augment::featurize(hasher, t))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            labels: list.labels.clone(),
            query_features,
            candidate_features,
            bb_query,
            bb_candidates,
            bb_dots,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// The parameters a loss can differentiate.
#[derive(Debug, Clone, Copy)]
pub enum Params<'a> {
    Augmenting(&'a AugmentingModel),
    Transform(&'a LinearTransform),
}

/// Loss value plus gradients. `main` holds the augmenting weights, the full
/// transform, or the low-rank left factor; `right` holds the low-rank right
/// factor and is empty otherwise.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub main: GradientBuffer,
    pub right: GradientBuffer,
}

fn aug_embeddings(
    model: &AugmentingModel,
    batch: &TrainBatch,
    mode: EncodeMode,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), LossError> {
    let q = encode_features_mode(model, &batch.query_features, mode)?.values().to_vec();
    let cands: Vec<Vec<f64>> = batch
        .candidate_features
        .iter()
        .map(|f| encode_features_mode(model, f, mode).map(|v| v.values().to_vec()))
        .collect::<Result<_, _>>()?;
    Ok((q, cands))
}

fn vec_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The candidate scores this trainable scorer feeds into the loss softmax.
pub fn batch_scores(
    scorer: TrainableScorer,
    params: &Params,
    batch: &TrainBatch,
) -> Result<Vec<f64>, LossError> {
    match (scorer, params) {
        (TrainableScorer::AugOnly, Params::Augmenting(model)) => {
            let (q, cands) = aug_embeddings(model, batch, EncodeMode::Normalized)?;
            Ok(cands.iter().map(|c| vec_dot(&q, c)).collect())
        }
        (TrainableScorer::Mafin, Params::Augmenting(model)) => {
            let (q, cands) = aug_embeddings(model, batch, EncodeMode::Normalized)?;
            Ok(cands
                .iter()
                .zip(&batch.bb_dots)
                .map(|(c, bb)| (bb + vec_dot(&q, c)) / 2.0)
                .collect())
        }
        (TrainableScorer::LambdaMafin, Params::Augmenting(model)) => {
            let (q, cands) = aug_embeddings(model, batch, EncodeMode::Unnormalized)?;
            let cq = lambda_coefficient(&q);
            Ok(cands
                .iter()
                .zip(&batch.bb_dots)
                .map(|(c, bb)| {
                    let ck = lambda_coefficient(c);
                    cq * ck * (bb + vec_dot(&q, c))
                })
                .collect())
        }
        (TrainableScorer::LinearTransform, Params::Transform(transform)) => {
            let vq = transform.apply_raw(batch.bb_query.values())?;
            let nq = normalize_or_err(&vq)?;
            batch
                .bb_candidates
                .iter()
                .map(|c| {
                    let vk = transform.apply_raw(c.values())?;
                    let nk = normalize_or_err(&vk)?;
                    Ok(vec_dot(&nq, &nk))
                })
                .collect()
        }
        (scorer, _) => {
            panic!("parameter kind does not match trainable scorer {scorer:?}")
        }
    }
}

fn lambda_coefficient(raw: &[f64]) -> f64 {
    1.0 / (1.0 + raw.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

fn normalize_or_err(v: &[f64]) -> Result<Vec<f64>, LossError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(LossError::Score(ScoreError::TransformCollapse));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Exact gradient of the configured loss w.r.t. the trainable parameters.
/// Black-box embeddings are constants; in combined modes the softmax sees
/// the full Mafin score but gradient flows only through the augmenting
/// terms.
pub fn loss_backward(
    config: &LossConfig,
    scorer: TrainableScorer,
    params: &Params,
    batch: &TrainBatch,
) -> Result<BatchGradient, LossError> {
    let scores = batch_scores(scorer, params, batch)?;
    let loss = config.loss(&batch.labels, &scores)?;
    let dscores = config.grad(&batch.labels, &scores)?;

    let mut main = GradientBuffer::default();
    let mut right = GradientBuffer::default();

    match (scorer, params) {
        (TrainableScorer::AugOnly, Params::Augmenting(model))
        | (TrainableScorer::Mafin, Params::Augmenting(model)) => {
            let factor = if scorer == TrainableScorer::AugOnly { 1.0 } else { 0.5 };
            let (q, cands) = aug_embeddings(model, batch, EncodeMode::Normalized)?;
            let d = model.aug_dim();
            let mut upstream_q = vec![0.0; d];
            for (c, &g) in cands.iter().zip(&dscores) {
                for (uq, cv) in upstream_q.iter_mut().zip(c) {
                    *uq += factor * g * cv;
                }
            }
            encode_backward_features_mode(
                model,
                &batch.query_features,
                &upstream_q,
                EncodeMode::Normalized,
                &mut main,
            );
            for ((feats, _c), &g) in
                batch.candidate_features.iter().zip(&cands).zip(&dscores)
            {
                let upstream_k: Vec<f64> = q.iter().map(|qv| factor * g * qv).collect();
                encode_backward_features_mode(
                    model,
                    feats,
                    &upstream_k,
                    EncodeMode::Normalized,
                    &mut main,
                );
            }
        }
        (TrainableScorer::LambdaMafin, Params::Augmenting(model)) => {
            let (q, cands) = aug_embeddings(model, batch, EncodeMode::Unnormalized)?;
            let cq = lambda_coefficient(&q);
            let d = model.aug_dim();
            let mut upstream_q = vec![0.0; d];
            for (k, (c, &g)) in cands.iter().zip(&dscores).enumerate() {
                let ck = lambda_coefficient(c);
                let s = cq * ck * (batch.bb_dots[k] + vec_dot(&q, c));
                // ds/dr_q = cq ck r_k - s cq^2 r_q
                for ((uq, cv), qv) in upstream_q.iter_mut().zip(c).zip(&q) {
                    *uq += g * (cq * ck * cv - s * cq * cq * qv);
                }
                // ds/dr_k = cq ck r_q - s ck^2 r_k
                let upstream_k: Vec<f64> = q
                    .iter()
                    .zip(c)
                    .map(|(qv, cv)| g * (cq * ck * qv - s * ck * ck * cv))
                    .collect();
                encode_backward_features_mode(
                    model,
                    &batch.candidate_features[k],
                    &upstream_k,
                    EncodeMode::Unnormalized,
                    &mut main,
                );
            }
            encode_backward_features_mode(
                model,
                &batch.query_features,
                &upstream_q,
                EncodeMode::Unnormalized,
                &mut main,
            );
        }
        (TrainableScorer::LinearTransform, Params::Transform(transform)) => {
            transform_backward(transform, batch, &dscores, &mut main, &mut right)?;
        }
        (scorer, _) => panic!("parameter kind does not match trainable scorer {scorer:?}"),
    }

    Ok(BatchGradient { loss, main, right })
}

fn transform_backward(
    transform: &LinearTransform,
    batch: &TrainBatch,
    dscores: &[f64],
    main: &mut GradientBuffer,
    right: &mut GradientBuffer,
) -> Result<(), LossError> {
    let vq = transform.apply_raw(batch.bb_query.values())?;
    let (nq_unit, nq_norm) = unit_and_norm(&vq)?;

    // accumulate dL/dW as a sum of outer products g (x) b
    let mut outer: Vec<(Vec<f64>, &[f64])> = Vec::with_capacity(batch.len() + 1);

    let mut upstream_q = vec![0.0; vq.len()];
    for (cand, &g) in batch.bb_candidates.iter().zip(dscores) {
        let vk = transform.apply_raw(cand.values())?;
        let (nk_unit, nk_norm) = unit_and_norm(&vk)?;
        for (uq, nk) in upstream_q.iter_mut().zip(&nk_unit) {
            *uq += g * nk;
        }
        // candidate side: project g * nq_unit through candidate's Jacobian
        let u: Vec<f64> = nq_unit.iter().map(|x| g * x).collect();
        let along = vec_dot(&u, &nk_unit);
        let g_vk: Vec<f64> =
            u.iter().zip(&nk_unit).map(|(uv, nv)| (uv - along * nv) / nk_norm).collect();
        outer.push((g_vk, cand.values()));
    }
    let along = vec_dot(&upstream_q, &nq_unit);
    let g_vq: Vec<f64> = upstream_q
        .iter()
        .zip(&nq_unit)
        .map(|(uv, nv)| (uv - along * nv) / nq_norm)
        .collect();
    outer.push((g_vq, batch.bb_query.values()));

    match transform {
        LinearTransform::Full { .. } => {
            for (g, b) in outer {
                for (i, gi) in g.iter().enumerate() {
                    if *gi == 0.0 {
                        continue;
                    }
                    for (j, bj) in b.iter().enumerate() {
                        main.accumulate(i as u32, j as u32, gi * bj);
                    }
                }
            }
        }
        LinearTransform::LowRank { rank, left, right: right_m, .. } => {
            let r = *rank;
            for (g, b) in outer {
                // t_r = W_r^T b; t_l = W_l^T g
                let dim = b.len();
                let mut t_r = vec![0.0; r];
                let mut t_l = vec![0.0; r];
                for j in 0..dim {
                    for c in 0..r {
                        t_r[c] += right_m[j * r + c] * b[j];
                        t_l[c] += left[j * r + c] * g[j];
                    }
                }
                for (i, gi) in g.iter().enumerate() {
                    for (c, trc) in t_r.iter().enumerate() {
                        main.accumulate(i as u32, c as u32, gi * trc);
                    }
                }
                for (j, bj) in b.iter().enumerate() {
                    for (c, tlc) in t_l.iter().enumerate() {
                        right.accumulate(j as u32, c as u32, bj * tlc);
                    }
                }
            }
        }
    }
    Ok(())
}

fn unit_and_norm(v: &[f64]) -> Result<(Vec<f64>, f64), LossError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(LossError::Score(ScoreError::TransformCollapse));
    }
    Ok((v.iter().map(|x| x / norm).collect(), norm))
}
