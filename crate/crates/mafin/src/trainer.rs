//! The optimization loop: epoch scheduling, validation, early stopping,
//! label-smoothing grid search, checkpoints.
//!
//! One optimizer step per query: each step samples a fresh candidate
//! sub-list, computes the configured ranking loss and its exact gradient,
//! and updates the trainable parameters. After every epoch the monitored
//! metric is evaluated on the validation split; training stops once it has
//! failed to improve for `patience` consecutive epochs (or at `max_epochs`).
//! Everything is driven by labeled child seeds, so a (seed, config, data)
//! triple fully determines the run.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{
    load_model, save_model, AugmentingModel, FeatureHasher, GradientBuffer, ModelError,
};
use crate::eval::{evaluate, EvalError, Metric, MetricSpec};
use crate::ingest::{Corpus, Qrels, QuerySet};
use crate::loss::{
    loss_backward, sample_negatives, LabeledList, LossConfig, LossError, Params, TrainBatch,
    TrainableScorer,
};
use crate::provider::{BlackBoxProvider, ProviderError};
use crate::rng::{child_seed, seeded_rng, shuffle};
use crate::scoring::{LinearTransform, ScoreError, Scorer, ScorerKind};
use crate::vector::QueryId;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("no train query has a positive passage")]
    NoTrainablePositives,
    #[error("loss became NaN at epoch {epoch} on query `{query}`")]
    NanLoss { epoch: usize, query: QueryId },
    #[error("scorer `{0}` cannot be trained directly; train its augmenting weights instead")]
    UntrainableScorer(ScorerKind),
    #[error("smoothing grid is empty")]
    EmptyGrid,
    #[error("transform checkpoint {path}: {message}")]
    TransformFormat { path: String, message: String },
    #[error("transform checkpoint {path}: CRC mismatch")]
    TransformCrc { path: String },
    #[error("transform checkpoint {path}: unsupported version {version}")]
    TransformVersion { path: String, version: u32 },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Sparse-friendly optimizer. Adam moments are kept per touched parameter
/// (lazy sparse Adam); untouched parameters keep stale moments, which is the
/// standard treatment for hashed-feature models.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    moments: HashMap<(u8, u32, u32), (f64, f64)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self { kind, learning_rate, step: 0, moments: HashMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the step counter; call once per batch before `apply_group`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one gradient buffer to one parameter group. `to_flat` maps the
    /// buffer's (row, col) keys into the flat weight slice.
    pub fn apply_group(
        &mut self,
        group: u8,
        weights: &mut [f64],
        grads: &GradientBuffer,
        to_flat: impl Fn(u32, u32) -> usize,
    ) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (&(r, c), &g) in grads.iter() {
                    weights[to_flat(r, c)] -= self.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bias1 = 1.0 - ADAM_BETA1.powi(t);
                let bias2 = 1.0 - ADAM_BETA2.powi(t);
                for (&(r, c), &g) in grads.iter() {
                    let (m, v) = self.moments.entry((group, r, c)).or_insert((0.0, 0.0));
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    weights[to_flat(r, c)] -=
                        self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Early stopping on a monitored validation metric: training halts after
/// `limit` consecutive epochs without strict improvement over the best.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_value: f64,
    pub best_epoch: usize,
    pub counter: usize,
    pub limit: usize,
}

impl EarlyStopState {
    pub fn new(limit: usize) -> Self {
        Self { best_value: f64::NEG_INFINITY, best_epoch: 0, counter: 0, limit }
    }

    /// Record an epoch's metric; returns true when it improved the best.
    pub fn update(&mut self, epoch: usize, value: f64) -> bool {
        if value > self.best_value {
            self.best_value = value;
            self.best_epoch = epoch;
            self.counter = 0;
            true
        } else {
            self.counter += 1;
            false
        }
    }

    pub fn exhausted(&self) -> bool {
        self.counter >= self.limit
    }
}

/// Validation metric that drives early stopping and model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorMetric {
    pub metric: Metric,
    pub k: usize,
}

impl Default for MonitorMetric {
    fn default() -> Self {
        Self { metric: Metric::Ndcg, k: 10 }
    }
}

impl MonitorMetric {
    pub fn label(&self) -> String {
        self.metric.label(self.k)
    }
}

impl std::str::FromStr for MonitorMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (name, k) = s
            .split_once('@')
            .ok_or_else(|| format!("expected metric@K, e.g. ndcg@10, got `{s}`"))?;
        let metric = match name.to_ascii_lowercase().as_str() {
            "recall" => Metric::Recall,
            "ndcg" => Metric::Ndcg,
            other => return Err(format!("unknown metric `{other}` (recall or ndcg)")),
        };
        let k: usize = k.parse().map_err(|_| format!("bad cutoff in `{s}`"))?;
        if k == 0 {
            return Err("cutoff must be >= 1".into());
        }
        Ok(Self { metric, k })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub monitor: MonitorMetric,
    pub include_titles: bool,
    pub seed: u64,
    /// Best checkpoint lands here when set.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            monitor: MonitorMetric::default(),
            include_titles: true,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

/// The parameters being trained, owned by the loop.
#[derive(Debug, Clone)]
pub enum TrainParams {
    Augmenting { model: AugmentingModel, hasher: FeatureHasher },
    Transform(LinearTransform),
}

impl TrainParams {
    fn as_params(&self) -> Params<'_> {
        match self {
            TrainParams::Augmenting { model, .. } => Params::Augmenting(model),
            TrainParams::Transform(t) => Params::Transform(t),
        }
    }

    /// Build an evaluation scorer over these parameters.
    pub fn scorer<'a>(
        &'a self,
        kind: ScorerKind,
        provider: &'a dyn BlackBoxProvider,
        include_titles: bool,
    ) -> Result<Scorer<'a>, ScoreError> {
        let (aug, transform) = match self {
            TrainParams::Augmenting { model, hasher } => (Some((model, hasher)), None),
            TrainParams::Transform(t) => (None, Some(t)),
        };
        Ok(Scorer::new(kind, provider, aug, transform)?.with_include_titles(include_titles))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Monitored validation metric after this epoch.
    pub monitored: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub scorer: ScorerKind,
    pub loss: LossConfig,
    pub trainer: TrainerConfig,
    pub monitor_label: String,
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub skipped_queries: Vec<QueryId>,
    pub timestamp: String,
}

/// A finished run: the report plus the best parameters seen.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: TrainParams,
}

pub struct TrainInputs<'a> {
    pub corpus: &'a Corpus,
    pub train: &'a QuerySet,
    pub validation: &'a QuerySet,
    pub qrels: &'a Qrels,
    pub provider: &'a dyn BlackBoxProvider,
}

fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

/// Train `params` for `scorer_kind` under the given loss. Queries without a
/// positive passage are skipped with a warning; an all-skipped train split
/// is an error.
pub fn train(
    inputs: &TrainInputs,
    scorer_kind: ScorerKind,
    loss: &LossConfig,
    config: &TrainerConfig,
    params: TrainParams,
) -> Result<TrainOutcome, TrainError> {
    loss.validate()?;
    let trainable = TrainableScorer::resolve(scorer_kind, loss.train_score)
        .map_err(|_| TrainError::UntrainableScorer(scorer_kind))?;
    if inputs.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if inputs.validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }

    // Queries must carry at least one positive; drop the rest with a warning.
    let mut skipped_queries = Vec::new();
    let mut train_queries = Vec::new();
    for query in inputs.train.iter() {
        let has_positive = inputs
            .qrels
            .docs_for(&query.id)
            .map(|docs| docs.values().any(|&y| y > 0))
            .unwrap_or(false);
        if has_positive {
            train_queries.push(query.clone());
        } else {
            log::warn!("query `{}` has no positive passage; skipped", query.id);
            skipped_queries.push(query.id.clone());
        }
    }
    if train_queries.is_empty() {
        return Err(TrainError::NoTrainablePositives);
    }

    let mut params = params;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut stopper = EarlyStopState::new(config.patience);
    let mut best = params.clone();
    let mut epochs = Vec::new();
    let monitor_spec = MetricSpec::new(config.monitor.metric, vec![config.monitor.k])?;

    let mut stopped_epoch = 0;
    for epoch in 1..=config.max_epochs {
        stopped_epoch = epoch;
        let mut order: Vec<usize> = (0..train_queries.len()).collect();
        shuffle(&mut order, &mut seeded_rng(child_seed(config.seed, &format!("shuffle-{epoch}"))));
        let mut negatives_rng = seeded_rng(child_seed(config.seed, &format!("negatives-{epoch}")));

        let mut loss_total = 0.0;
        for &qi in &order {
            let query = &train_queries[qi];
            let sampled = sample_negatives(
                &query.id,
                inputs.qrels,
                inputs.corpus,
                loss.negatives,
                &mut negatives_rng,
            )?;
            let list = LabeledList::new(query.id.clone(), sampled.docs, sampled.labels)?;
            let batch = build_batch(&list, &query.text, inputs, config.include_titles, &params)?;
            let gradient = loss_backward(loss, trainable, &params.as_params(), &batch)?;
            if !gradient.loss.is_finite() {
                return Err(TrainError::NanLoss { epoch, query: query.id.clone() });
            }
            loss_total += gradient.loss;

            optimizer.begin_step();
            match &mut params {
                TrainParams::Augmenting { model, .. } => {
                    let aug_dim = model.aug_dim();
                    optimizer.apply_group(0, model.weights_mut(), &gradient.main, |r, f| {
                        f as usize * aug_dim + r as usize
                    });
                }
                TrainParams::Transform(transform) => match transform {
                    LinearTransform::Full { dim, weights } => {
                        let d = *dim;
                        optimizer.apply_group(0, weights, &gradient.main, |r, c| {
                            r as usize * d + c as usize
                        });
                    }
                    LinearTransform::LowRank { rank, left, right, .. } => {
                        let k = *rank;
                        optimizer.apply_group(0, left, &gradient.main, |r, c| {
                            r as usize * k + c as usize
                        });
                        optimizer.apply_group(1, right, &gradient.right, |r, c| {
                            r as usize * k + c as usize
                        });
                    }
                },
            }
        }
        let mean_loss = loss_total / order.len() as f64;

        let monitored = {
            let scorer = params.scorer(scorer_kind, inputs.provider, config.include_titles)?;
            let (report, _) = evaluate(
                &scorer,
                inputs.validation,
                inputs.corpus,
                inputs.qrels,
                std::slice::from_ref(&monitor_spec),
            )?;
            report
                .mean(config.monitor.metric, config.monitor.k)
                .expect("monitored metric was just computed")
        };
        epochs.push(EpochRecord { epoch, mean_loss, monitored });

        if stopper.update(epoch, monitored) {
            best = params.clone();
        }
        if stopper.exhausted() {
            break;
        }
    }

    let best_checkpoint = match &config.checkpoint_dir {
        Some(dir) => Some(checkpoint_save(dir, &best)?),
        None => None,
    };

    Ok(TrainOutcome {
        report: TrainReport {
            scorer: scorer_kind,
            loss: *loss,
            trainer: config.clone(),
            monitor_label: config.monitor.label(),
            epochs,
            stopped_epoch,
            best_epoch: stopper.best_epoch,
            best_metric: stopper.best_value,
            best_checkpoint,
            skipped_queries,
            timestamp: timestamp(),
        },
        best,
    })
}

fn build_batch(
    list: &LabeledList,
    query_text: &str,
    inputs: &TrainInputs,
    include_titles: bool,
    params: &TrainParams,
) -> Result<TrainBatch, TrainError> {
    let hasher = match params {
        TrainParams::Augmenting { hasher, .. } => *hasher,
        // The transform path never reads the features, but the batch type
        // carries them; any fixed hasher works.
        TrainParams::Transform(_) => FeatureHasher::new(2, 0)?,
    };
    Ok(TrainBatch::build(
        list,
        query_text,
        inputs.corpus,
        include_titles,
        &hasher,
        inputs.provider,
    )?)
}

/// The label-smoothing values searched when none is given explicitly.
pub const DEFAULT_SMOOTHING_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug)]
pub struct GridOutcome {
    pub best_smoothing: f64,
    pub best: TrainOutcome,
    /// One report per grid value, in grid order.
    pub runs: Vec<(f64, TrainReport)>,
}

/// Train once per smoothing value with identical seeds; pick the value whose
/// best validation metric is highest, ties to the smaller epsilon.
pub fn grid_search_smoothing(
    inputs: &TrainInputs,
    scorer_kind: ScorerKind,
    base_loss: &LossConfig,
    config: &TrainerConfig,
    grid: &[f64],
    fresh_params: impl Fn() -> TrainParams,
) -> Result<GridOutcome, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let mut runs = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, TrainOutcome)> = None;
    for &eps in grid {
        let loss = LossConfig { smoothing: eps, ..*base_loss };
        let outcome = train(inputs, scorer_kind, &loss, config, fresh_params())?;
        let metric = outcome.report.best_metric;
        runs.push((eps, outcome.report.clone()));
        let better = match &best {
            None => true,
            Some((_, current)) => metric > current.report.best_metric,
        };
        if better {
            best = Some((eps, outcome));
        }
    }
    let (best_smoothing, best) = best.expect("grid is non-empty");
    Ok(GridOutcome { best_smoothing, best, runs })
}

/// Serialize a report as pretty JSON.
pub fn save_report(path: &Path, report: &TrainReport) -> Result<(), TrainError> {
    let file = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), report)
        .map_err(|e| TrainError::Io(std::io::Error::other(e)))?;
    Ok(())
}

const TRANSFORM_MAGIC: &[u8; 4] = b"MAFT";
const TRANSFORM_VERSION: u32 = 1;

/// Write the best parameters under `dir`; augmenting models go to
/// `best.mafw`, transforms to `best.maft`. Returns the file path.
pub fn checkpoint_save(dir: &Path, params: &TrainParams) -> Result<PathBuf, TrainError> {
    std::fs::create_dir_all(dir)?;
    match params {
        TrainParams::Augmenting { model, hasher } => {
            let path = dir.join("best.mafw");
            save_model(&path, model, hasher)?;
            Ok(path)
        }
        TrainParams::Transform(transform) => {
            let path = dir.join("best.maft");
            save_transform(&path, transform)?;
            Ok(path)
        }
    }
}

/// Load parameters back from either checkpoint kind, by extension.
pub fn checkpoint_load(path: &Path) -> Result<TrainParams, TrainError> {
    if path.extension().and_then(|e| e.to_str()) == Some("maft") {
        Ok(TrainParams::Transform(load_transform(path)?))
    } else {
        let (model, hasher) = load_model(path)?;
        Ok(TrainParams::Augmenting { model, hasher })
    }
}

/// Transform checkpoint: magic `MAFT`, version, mode byte (0 full,
/// 1 low-rank), dim u32, rank u32 (0 for full), the f64 LE weights (full: D*D
/// row-major; low-rank: left then right, each D*R row-major), trailing CRC32.
pub fn save_transform(path: &Path, transform: &LinearTransform) -> Result<(), TrainError> {
    let mut payload = Vec::new();
    payload.extend_from_slice(TRANSFORM_MAGIC);
    payload.extend_from_slice(&TRANSFORM_VERSION.to_le_bytes());
    match transform {
        LinearTransform::Full { dim, weights } => {
            payload.push(0);
            payload.extend_from_slice(&(*dim as u32).to_le_bytes());
            payload.extend_from_slice(&0u32.to_le_bytes());
            for w in weights {
                payload.extend_from_slice(&w.to_le_bytes());
            }
        }
        LinearTransform::LowRank { dim, rank, left, right } => {
            payload.push(1);
            payload.extend_from_slice(&(*dim as u32).to_le_bytes());
            payload.extend_from_slice(&(*rank as u32).to_le_bytes());
            for w in left.iter().chain(right) {
                payload.extend_from_slice(&w.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&payload);
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&payload)?;
    out.write_all(&crc.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn load_transform(path: &Path) -> Result<LinearTransform, TrainError> {
    let format_err = |message: &str| TrainError::TransformFormat {
        path: path.display().to_string(),
        message: message.to_string(),
    };
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 4 + 1 + 4 + 4 + 4 {
        return Err(format_err("file too short"));
    }
    let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if stored != crc32fast::hash(payload) {
        return Err(TrainError::TransformCrc { path: path.display().to_string() });
    }
    if &payload[0..4] != TRANSFORM_MAGIC {
        return Err(format_err("bad magic (not a MAFT checkpoint)"));
    }
    let version = u32::from_le_bytes(payload[4..8].try_into().expect("4 bytes"));
    if version != TRANSFORM_VERSION {
        return Err(TrainError::TransformVersion { path: path.display().to_string(), version });
    }
    let mode = payload[8];
    let dim = u32::from_le_bytes(payload[9..13].try_into().expect("4 bytes")) as usize;
    let rank = u32::from_le_bytes(payload[13..17].try_into().expect("4 bytes")) as usize;
    let body = &payload[17..];
    let read_f64s = |bytes: &[u8]| -> Vec<f64> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    match mode {
        0 => {
            if body.len() != dim * dim * 8 {
                return Err(format_err("weight payload size mismatch"));
            }
            Ok(LinearTransform::Full { dim, weights: read_f64s(body) })
        }
        1 => {
            if rank == 0 || body.len() != 2 * dim * rank * 8 {
                return Err(format_err("weight payload size mismatch"));
            }
            let (l, r) = body.split_at(dim * rank * 8);
            Ok(LinearTransform::LowRank {
                dim,
                rank,
                left: read_f64s(l),
                right: read_f64s(r),
            })
        }
        other => Err(format_err(&format!("unknown mode byte {other}"))),
    }
}
