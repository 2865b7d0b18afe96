//! Label-free fine-tuning support: one synthetic query per passage.
//!
//! A generator (remote LLM or deterministic offline template) produces a
//! query for each passage; the pair is then treated as one-hot relevant —
//! the query matches its source passage and nothing else — which feeds the
//! InfoNCE training path. Pairs are persisted as JSON-lines before training.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Corpus, Passage, Qrels, Query, QuerySet};
use crate::loss::{LabeledList, LossError};
use crate::rng::{seeded_rng, shuffle};
use crate::vector::{DocId, QueryId};

/// Environment variable holding the LLM bearer token.
pub const LLM_TOKEN_ENV: &str = "MAFIN_LLM_TOKEN";

/// The generation instruction sent to a remote model.
pub const GENERATION_PROMPT: &str = "generate a query based on the given passage";

#[derive(Debug, Error)]
pub enum GenError {
    #[error("corpus is empty; nothing to generate from")]
    EmptyCorpus,
    #[error("environment variable {0} is not set (required for the remote generator)")]
    TokenMissing(&'static str),
    #[error("remote generation failed after {attempts} attempts: {message}")]
    Remote { attempts: u32, message: String },
    #[error("pair file {path}:{line}: {message}")]
    PairFormat { path: String, line: usize, message: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Emits exactly one non-empty query string per passage.
pub trait QueryGenerator {
    /// Stable tag for provenance in reports.
    fn identity(&self) -> &str;

    fn generate(&self, passage: &Passage) -> Result<String, GenError>;
}

/// Compact built-in English stopword list used by the offline generator.
/// Frozen as data so offline generation is reproducible everywhere.
pub const STOPWORDS: [&str; 124] = [
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from",
    "further", "had", "has", "have", "having", "he", "her", "here", "hers", "him", "his", "how",
    "i", "if", "in", "into", "is", "it", "its", "just", "me", "more", "most", "my", "no", "nor",
    "not", "now", "of", "off", "on", "once", "only", "or", "other", "our", "ours", "out", "over",
    "own", "same", "she", "should", "so", "some", "such", "than", "that", "the", "their",
    "theirs", "them", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "done", "also", "may", "might", "must", "shall",
];

fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

/// Deterministic template generator used when no LLM is reachable.
#[derive(Debug, Clone, Copy)]
pub struct OfflineGenerator {
    seed: u64,
}

impl OfflineGenerator {
    /// The template itself is fully deterministic; the seed is carried for
    /// interface parity and provenance.
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl QueryGenerator for OfflineGenerator {
    fn identity(&self) -> &str {
        "offline-template"
    }

    fn generate(&self, passage: &Passage) -> Result<String, GenError> {
        Ok(offline_generate(&passage.text, self.seed))
    }
}

/// Template query from the two highest-count non-stopword tokens (count
/// descending, then lexicographic). All-stopword passages get a fixed
/// fallback question.
pub fn offline_generate(passage_text: &str, _seed: u64) -> String {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for raw in passage_text.split_whitespace() {
        let token: String = raw
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase();
        if token.is_empty() || is_stopword(&token) {
            continue;
        }
        *counts.entry(token).or_insert(0) += 1;
    }
    let mut ranked: Vec<(&String, &usize)> = counts.iter().collect();
    // BTreeMap iteration is lexicographic, so a stable sort by count keeps
    // the documented tie-break.
    ranked.sort_by(|a, b| b.1.cmp(a.1));
    match (ranked.first(), ranked.get(1)) {
        (Some((t1, _)), Some((t2, _))) => {
            format!("what does this passage explain about {t1} and {t2}?")
        }
        (Some((t1, _)), None) => format!("what does this passage explain about {t1} and {t1}?"),
        (None, _) => "what is this passage about?".to_string(),
    }
}

/// Remote chat-completion generator. Wire format: POST
/// `{"model", "messages": [{"role": "user", "content": prompt + passage}],
/// "temperature"}`; the reply text is `choices[0].message.content`.
pub struct RemoteGenerator {
    base_url: String,
    model: String,
    temperature: f64,
    attempts: u32,
    token: String,
    identity: String,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

impl RemoteGenerator {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Result<Self, GenError> {
        let token =
            std::env::var(LLM_TOKEN_ENV).map_err(|_| GenError::TokenMissing(LLM_TOKEN_ENV))?;
        Ok(Self::with_token(base_url, model, token))
    }

    pub fn with_token(
        base_url: impl Into<String>,
        model: impl Into<String>,
        token: String,
    ) -> Self {
        let model = model.into();
        let identity = format!("remote-{model}");
        Self {
            base_url: base_url.into(),
            model,
            temperature: 0.7,
            attempts: 3,
            token,
            identity,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }
}

impl QueryGenerator for RemoteGenerator {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn generate(&self, passage: &Passage) -> Result<String, GenError> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: format!("{GENERATION_PROMPT}\n\n{}", passage.text),
            }],
            temperature: self.temperature,
        };
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(200 * u64::from(attempt)));
            }
            let result = ureq::post(&self.base_url)
                .header("Authorization", &format!("Bearer {}", self.token))
                .send_json(&body)
                .map_err(|e| e.to_string())
                .and_then(|mut r| {
                    r.body_mut().read_json::<ChatResponse>().map_err(|e| e.to_string())
                });
            match result {
                Ok(response) => {
                    let text = response
                        .choices
                        .first()
                        .map(|c| c.message.content.trim().to_string())
                        .unwrap_or_default();
                    if text.is_empty() {
                        last = "empty completion".to_string();
                        continue;
                    }
                    return Ok(text);
                }
                Err(message) => last = message,
            }
        }
        Err(GenError::Remote { attempts: self.attempts, message: last })
    }
}

/// One synthetic (query, passage) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub query_id: QueryId,
    pub text: String,
    pub doc_id: DocId,
}

/// All pairs for a corpus plus the passages that failed generation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyntheticPairSet {
    pub pairs: Vec<SyntheticPair>,
    pub skipped: Vec<DocId>,
    pub generator: String,
}

impl SyntheticPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// View the pairs as a query set plus one-hot qrels, ready for the
    /// supervised training loop.
    pub fn as_training_data(&self) -> (QuerySet, Qrels) {
        let queries = QuerySet::from_queries(
            self.pairs
                .iter()
                .map(|p| Query { id: p.query_id.clone(), text: p.text.clone() })
                .collect(),
        )
        .expect("synthetic ids are unique by construction");
        let mut qrels = Qrels::default();
        for pair in &self.pairs {
            qrels.insert(pair.query_id.clone(), pair.doc_id.clone(), 1);
        }
        (queries, qrels)
    }
}

/// Generate one query per passage, in corpus order. Failed passages are
/// skipped with a warning and recorded; everything else is deterministic
/// for the offline generator.
pub fn generate_pairs(
    generator: &dyn QueryGenerator,
    corpus: &Corpus,
    _seed: u64,
) -> Result<SyntheticPairSet, GenError> {
    if corpus.is_empty() {
        return Err(GenError::EmptyCorpus);
    }
    let mut set = SyntheticPairSet {
        generator: generator.identity().to_string(),
        ..SyntheticPairSet::default()
    };
    for passage in corpus.iter() {
        match generator.generate(passage) {
            Ok(text) => {
                debug_assert_ne!(text, passage.text, "query must differ from its passage");
                set.pairs.push(SyntheticPair {
                    query_id: QueryId::new(format!("synth-{}", passage.id))
                        .expect("doc ids are non-empty"),
                    text,
                    doc_id: passage.id.clone(),
                });
            }
            Err(e) => {
                log::warn!("generation failed for passage {}: {e}", passage.id);
                set.skipped.push(passage.id.clone());
            }
        }
    }
    Ok(set)
}

/// For each pair: its passage (label 1) plus M - 1 other passages (label 0),
/// positions shuffled. Feeds the single-positive InfoNCE path.
pub fn pairs_to_training_lists(
    pairs: &SyntheticPairSet,
    corpus: &Corpus,
    m: usize,
    seed: u64,
) -> Result<Vec<LabeledList>, GenError> {
    if m < 2 {
        return Err(GenError::Loss(LossError::BadNegatives(m)));
    }
    if corpus.len() < m {
        return Err(GenError::Loss(LossError::CorpusTooSmall { m, corpus: corpus.len() }));
    }
    let mut rng = seeded_rng(seed);
    let mut lists = Vec::with_capacity(pairs.len());
    for pair in &pairs.pairs {
        let mut others: Vec<&DocId> =
            corpus.iter().map(|p| &p.id).filter(|d| **d != pair.doc_id).collect();
        let wanted = m - 1;
        // partial Fisher-Yates over the other passages
        for i in 0..wanted {
            let j = rand::Rng::gen_range(&mut rng, i..others.len());
            others.swap(i, j);
        }
        let mut docs: Vec<DocId> = Vec::with_capacity(m);
        docs.push(pair.doc_id.clone());
        docs.extend(others[..wanted].iter().map(|d| (*d).clone()));
        shuffle(&mut docs, &mut rng);
        let labels: Vec<u32> =
            docs.iter().map(|d| u32::from(*d == pair.doc_id)).collect();
        lists.push(LabeledList::new(pair.query_id.clone(), docs, labels)?);
    }
    Ok(lists)
}

/// Pair file: JSON-lines `{"query_id": "synth-<docid>", "text": ..., "doc_id": ...}`.
pub fn save_pairs(path: &Path, pairs: &SyntheticPairSet) -> Result<(), GenError> {
    let mut out = BufWriter::new(File::create(path)?);
    for pair in &pairs.pairs {
        serde_json::to_writer(&mut out, pair).map_err(|e| GenError::PairFormat {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<SyntheticPairSet, GenError> {
    let file = File::open(path)?;
    let mut set = SyntheticPairSet { generator: "file".to_string(), ..Default::default() };
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: SyntheticPair =
            serde_json::from_str(&line).map_err(|e| GenError::PairFormat {
                path: path.display().to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        set.pairs.push(pair);
    }
    Ok(set)
}
