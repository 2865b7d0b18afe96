//! BEIR-style dataset ingestion: JSON-lines corpora and query sets, TSV
//! relevance judgments, and deterministic query-level splits.
//!
//! File formats:
//! - corpus: one JSON object per line, fields `_id`, `title`, `text`
//! - queries: one JSON object per line, fields `_id`, `text`
//! - qrels: TSV with header `query-id\tcorpus-id\tscore`
//!
//! Splits always partition queries; the corpus is the shared retrieval pool.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{seeded_rng, shuffle};
use crate::vector::{DocId, QueryId};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}:{line}: duplicate id `{id}`")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("qrels references unknown {kind} id `{id}`")]
    UnknownReference { kind: &'static str, id: String },
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("split `{0}` would be empty")]
    EmptySplit(&'static str),
    #[error("query `{0}` appears in more than one split")]
    OverlappingSplits(QueryId),
}

/// One passage of the retrieval pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub id: DocId,
    pub title: String,
    pub text: String,
}

impl Passage {
    /// The text handed to embedding models: `title + " " + text` when a title
    /// exists and titles are enabled (recorded as config so runs are auditable).
    pub fn embedding_text(&self, include_title: bool) -> String {
        if include_title && !self.title.is_empty() {
            format!("{} {}", self.title, self.text)
        } else {
            self.text.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: QueryId,
    pub text: String,
}

/// Passages in file order with an id index.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<DocId, usize>,
}

impl Corpus {
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self, IngestError> {
        let mut corpus = Corpus::default();
        for p in passages {
            corpus.push(p, "<memory>", 0)?;
        }
        Ok(corpus)
    }

    fn push(&mut self, passage: Passage, path: &str, line: usize) -> Result<(), IngestError> {
        if self.by_id.contains_key(&passage.id) {
            return Err(IngestError::DuplicateId {
                path: path.to_string(),
                line,
                id: passage.id.to_string(),
            });
        }
        self.by_id.insert(passage.id.clone(), self.passages.len());
        self.passages.push(passage);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &DocId) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn contains(&self, id: &DocId) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn iter(&self) -> impl Iterator<Item = &Passage> {
        self.passages.iter()
    }
}

/// Queries in file order with an id index.
#[derive(Debug, Clone, Default)]
pub struct QuerySet {
    queries: Vec<Query>,
    by_id: HashMap<QueryId, usize>,
}

impl QuerySet {
    pub fn from_queries(queries: Vec<Query>) -> Result<Self, IngestError> {
        let mut set = QuerySet::default();
        for q in queries {
            set.push(q, "<memory>", 0)?;
        }
        Ok(set)
    }

    fn push(&mut self, query: Query, path: &str, line: usize) -> Result<(), IngestError> {
        if self.by_id.contains_key(&query.id) {
            return Err(IngestError::DuplicateId {
                path: path.to_string(),
                line,
                id: query.id.to_string(),
            });
        }
        self.by_id.insert(query.id.clone(), self.queries.len());
        self.queries.push(query);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn contains(&self, id: &QueryId) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn get(&self, id: &QueryId) -> Option<&Query> {
        self.by_id.get(id).map(|&i| &self.queries[i])
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn iter(&self) -> impl Iterator<Item = &Query> {
        self.queries.iter()
    }
}

/// Graded relevance judgments, (query, doc) -> label >= 0.
///
/// BTreeMaps keep iteration order deterministic for sampling and evaluation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    map: BTreeMap<QueryId, BTreeMap<DocId, u32>>,
}

impl Qrels {
    pub fn insert(&mut self, query: QueryId, doc: DocId, relevance: u32) -> Option<u32> {
        self.map.entry(query).or_default().insert(doc, relevance)
    }

    /// Label for a pair; absent pairs are 0 by convention.
    pub fn relevance(&self, query: &QueryId, doc: &DocId) -> u32 {
        self.map.get(query).and_then(|m| m.get(doc)).copied().unwrap_or(0)
    }

    /// Judged documents for a query, label-ascending by doc id order.
    pub fn docs_for(&self, query: &QueryId) -> Option<&BTreeMap<DocId, u32>> {
        self.map.get(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &QueryId> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Every referenced query and doc must exist in the loaded collections.
    pub fn validate_against(&self, queries: &QuerySet, corpus: &Corpus) -> Result<(), IngestError> {
        for (qid, docs) in &self.map {
            if !queries.contains(qid) {
                return Err(IngestError::UnknownReference { kind: "query", id: qid.to_string() });
            }
            for doc in docs.keys() {
                if !corpus.contains(doc) {
                    return Err(IngestError::UnknownReference { kind: "doc", id: doc.to_string() });
                }
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct CorpusRecord {
    _id: String,
    #[serde(default)]
    title: String,
    text: String,
}

#[derive(Serialize)]
struct CorpusRecordOut<'a> {
    _id: &'a str,
    title: &'a str,
    text: &'a str,
}

#[derive(Deserialize)]
struct QueryRecord {
    _id: String,
    text: String,
}

#[derive(Serialize)]
struct QueryRecordOut<'a> {
    _id: &'a str,
    text: &'a str,
}

fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IngestError {
    IngestError::Parse { path: path.display().to_string(), line, message: message.into() }
}

/// Load a JSON-lines corpus, preserving file order. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Corpus, IngestError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut corpus = Corpus::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
        if record.text.trim().is_empty() {
            return Err(parse_err(path, line_no, "passage `text` is empty"));
        }
        let id = DocId::new(record._id)
            .map_err(|_| parse_err(path, line_no, "passage `_id` is empty"))?;
        corpus.push(
            Passage { id, title: record.title, text: record.text },
            &path.display().to_string(),
            line_no,
        )?;
    }
    if corpus.is_empty() {
        log::warn!("{}: corpus file is empty", path.display());
    }
    Ok(corpus)
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<(), IngestError> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for p in corpus.iter() {
        let record =
            CorpusRecordOut { _id: p.id.as_str(), title: &p.title, text: &p.text };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| parse_err(path, 0, e.to_string()))?;
        out.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Load a JSON-lines query set, preserving file order.
pub fn load_queries(path: &Path) -> Result<QuerySet, IngestError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut set = QuerySet::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QueryRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
        if record.text.trim().is_empty() {
            return Err(parse_err(path, line_no, "query `text` is empty"));
        }
        let id = QueryId::new(record._id)
            .map_err(|_| parse_err(path, line_no, "query `_id` is empty"))?;
        set.push(Query { id, text: record.text }, &path.display().to_string(), line_no)?;
    }
    Ok(set)
}

pub fn save_queries(path: &Path, queries: &QuerySet) -> Result<(), IngestError> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for q in queries.iter() {
        let record = QueryRecordOut { _id: q.id.as_str(), text: &q.text };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| parse_err(path, 0, e.to_string()))?;
        out.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

const QRELS_HEADER: [&str; 3] = ["query-id", "corpus-id", "score"];

/// Load TSV qrels. Negative scores clamp to 0 with a warning (the losses
/// assume labels >= 0); duplicate pairs keep the last value with a warning.
pub fn load_qrels(path: &Path) -> Result<Qrels, IngestError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut qrels = Qrels::default();
    let mut lines = BufReader::new(file).lines().enumerate();

    match lines.next() {
        None => return Ok(qrels),
        Some((_, header)) => {
            let header = header.map_err(|e| io_err(path, e))?;
            let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
            if cols != QRELS_HEADER {
                return Err(parse_err(
                    path,
                    1,
                    format!("unknown qrels header `{header}` (expected `query-id\\tcorpus-id\\tscore`)"),
                ));
            }
        }
    }

    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(path, line_no, format!("expected 3 columns, got {}", cols.len())));
        }
        let query = QueryId::new(cols[0])
            .map_err(|_| parse_err(path, line_no, "empty query-id"))?;
        let doc = DocId::new(cols[1]).map_err(|_| parse_err(path, line_no, "empty corpus-id"))?;
        let raw: i64 = cols[2]
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("non-integer score `{}`", cols[2])))?;
        let score = if raw < 0 {
            log::warn!("{}:{line_no}: negative score {raw} clamped to 0", path.display());
            0
        } else {
            u32::try_from(raw)
                .map_err(|_| parse_err(path, line_no, format!("score {raw} out of range")))?
        };
        if let Some(previous) = qrels.insert(query.clone(), doc.clone(), score) {
            log::warn!(
                "{}:{line_no}: duplicate pair ({query}, {doc}); {previous} replaced by {score}",
                path.display()
            );
        }
    }
    Ok(qrels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Train/validation/test query files are given as-is; no shuffling.
    UseProvidedSplits,
    /// Carve train/validation (and optionally test) out of one development
    /// set by seeded shuffle.
    FractionOfDev,
}

/// How to partition queries. `test_fraction` is 0 when the test set comes
/// from its own file (the usual BEIR layout).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train_fraction: f64,
    #[serde(default)]
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn fraction_of_dev(train_fraction: f64, seed: u64) -> Self {
        Self { mode: SplitMode::FractionOfDev, train_fraction, test_fraction: 0.0, seed }
    }

    fn validate(&self) -> Result<(), IngestError> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(IngestError::InvalidSplit(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.test_fraction < 0.0 || self.train_fraction + self.test_fraction >= 1.0 {
            return Err(IngestError::InvalidSplit(format!(
                "fractions must satisfy train + test < 1, got {} + {}",
                self.train_fraction, self.test_fraction
            )));
        }
        Ok(())
    }
}

/// A query-level partition; the qrels stay shared and are indexed per query.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: QuerySet,
    pub validation: QuerySet,
    pub test: QuerySet,
}

impl Splits {
    /// Wrap already-partitioned query sets (`use-provided-splits` mode),
    /// verifying disjointness.
    pub fn from_provided(
        train: QuerySet,
        validation: QuerySet,
        test: QuerySet,
    ) -> Result<Self, IngestError> {
        for q in validation.iter().chain(test.iter()) {
            if train.contains(&q.id) {
                return Err(IngestError::OverlappingSplits(q.id.clone()));
            }
        }
        for q in test.iter() {
            if validation.contains(&q.id) {
                return Err(IngestError::OverlappingSplits(q.id.clone()));
            }
        }
        if train.is_empty() {
            return Err(IngestError::EmptySplit("train"));
        }
        if validation.is_empty() {
            return Err(IngestError::EmptySplit("validation"));
        }
        Ok(Self { train, validation, test })
    }
}

/// Partition queries by seeded shuffle. Deterministic: identical
/// (queries, seed, fractions) give identical partitions on any platform.
pub fn split(queries: &QuerySet, _qrels: &Qrels, spec: &SplitSpec) -> Result<Splits, IngestError> {
    if spec.mode == SplitMode::UseProvidedSplits {
        return Err(IngestError::InvalidSplit(
            "use-provided-splits takes the three query files directly; see Splits::from_provided"
                .into(),
        ));
    }
    spec.validate()?;
    let n = queries.len();
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut seeded_rng(spec.seed));

    let n_train = (n as f64 * spec.train_fraction).round() as usize;
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(IngestError::EmptySplit(if n_train == 0 { "train" } else { "validation" }));
    }
    if n_train + n_test >= n {
        return Err(IngestError::EmptySplit("validation"));
    }
    if spec.test_fraction > 0.0 && n_test == 0 {
        return Err(IngestError::EmptySplit("test"));
    }

    let pick = |range: std::ops::Range<usize>| -> Result<QuerySet, IngestError> {
        let mut idx: Vec<usize> = order[range].to_vec();
        idx.sort_unstable(); // keep file order inside each split
        QuerySet::from_queries(idx.into_iter().map(|i| queries.queries()[i].clone()).collect())
    };

    Ok(Splits {
        train: pick(0..n_train)?,
        test: pick(n_train..n_train + n_test)?,
        validation: pick(n_train + n_test..n)?,
    })
}

/// Manifest listing which query ids landed in which split.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub train: Vec<QueryId>,
    pub validation: Vec<QueryId>,
    pub test: Vec<QueryId>,
}

impl SplitManifest {
    pub fn from_splits(spec: SplitSpec, splits: &Splits) -> Self {
        let ids = |set: &QuerySet| set.iter().map(|q| q.id.clone()).collect();
        Self {
            spec,
            train: ids(&splits.train),
            validation: ids(&splits.validation),
            test: ids(&splits.test),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| parse_err(path, 0, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| parse_err(path, 0, e.to_string()))
    }

    /// Materialize the manifest against a loaded query set.
    pub fn apply(&self, queries: &QuerySet) -> Result<Splits, IngestError> {
        let materialize = |ids: &[QueryId]| -> Result<QuerySet, IngestError> {
            let mut out = Vec::with_capacity(ids.len());
            for id in ids {
                let q = queries.get(id).ok_or_else(|| IngestError::UnknownReference {
                    kind: "query",
                    id: id.to_string(),
                })?;
                out.push(q.clone());
            }
            QuerySet::from_queries(out)
        };
        Splits::from_provided(
            materialize(&self.train)?,
            materialize(&self.validation)?,
            materialize(&self.test)?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_file(dir: &tempfile::TempDir, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    fn qid(s: &str) -> QueryId {
        QueryId::new(s).unwrap()
    }

    fn did(s: &str) -> DocId {
        DocId::new(s).unwrap()
    }

    #[test]
    fn load_corpus_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "corpus.jsonl",
            "{\"_id\":\"d1\",\"title\":\"t\",\"text\":\"first\"}\n{\"_id\":\"d2\",\"title\":\"\",\"text\":\"second\"}\n",
        );
        let corpus = load_corpus(&path).unwrap();
        assert_eq!(corpus.len(), 2);
        let ids: Vec<&str> = corpus.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["d1", "d2"]);
    }

    #[test]
    fn load_corpus_missing_text_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "corpus.jsonl",
            "{\"_id\":\"d1\",\"text\":\"ok\"}\n{\"_id\":\"d2\",\"title\":\"t\"}\n",
        );
        let err = load_corpus(&path).unwrap_err();
        match err {
            IngestError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_corpus_duplicate_id_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "corpus.jsonl",
            "{\"_id\":\"d1\",\"text\":\"a\"}\n{\"_id\":\"d1\",\"text\":\"b\"}\n",
        );
        assert!(matches!(load_corpus(&path).unwrap_err(), IngestError::DuplicateId { line: 2, .. }));
    }

    #[test]
    fn load_corpus_empty_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "corpus.jsonl", "");
        assert_eq!(load_corpus(&path).unwrap().len(), 0);
    }

    #[test]
    fn corpus_roundtrip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "corpus.jsonl",
            "{\"_id\":\"d1\",\"title\":\"Greek letters\",\"text\":\"alpha beta\"}\n{\"_id\":\"d2\",\"title\":\"\",\"text\":\"gamma\"}\n",
        );
        let corpus = load_corpus(&path).unwrap();
        let out = dir.path().join("copy.jsonl");
        save_corpus(&out, &corpus).unwrap();
        let reloaded = load_corpus(&out).unwrap();
        assert_eq!(corpus.passages(), reloaded.passages());
    }

    #[test]
    fn load_qrels_basic_and_clamping() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "qrels.tsv",
            "query-id\tcorpus-id\tscore\nq1\td1\t2\nq1\td2\t-1\n",
        );
        let qrels = load_qrels(&path).unwrap();
        assert_eq!(qrels.relevance(&qid("q1"), &did("d1")), 2);
        assert_eq!(qrels.relevance(&qid("q1"), &did("d2")), 0); // clamped
    }

    #[test]
    fn load_qrels_duplicate_last_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "qrels.tsv",
            "query-id\tcorpus-id\tscore\nq1\td1\t1\nq1\td1\t2\n",
        );
        let qrels = load_qrels(&path).unwrap();
        assert_eq!(qrels.relevance(&qid("q1"), &did("d1")), 2);
    }

    #[test]
    fn load_qrels_rejects_unknown_header_and_bad_score() {
        let dir = tempfile::tempdir().unwrap();
        let bad_header = write_file(&dir, "a.tsv", "qid\tdid\trel\nq1\td1\t1\n");
        assert!(matches!(load_qrels(&bad_header).unwrap_err(), IngestError::Parse { line: 1, .. }));
        let bad_score = write_file(&dir, "b.tsv", "query-id\tcorpus-id\tscore\nq1\td1\ttwo\n");
        assert!(matches!(load_qrels(&bad_score).unwrap_err(), IngestError::Parse { line: 2, .. }));
    }

    #[test]
    fn load_qrels_header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "qrels.tsv", "query-id\tcorpus-id\tscore\n");
        assert!(load_qrels(&path).unwrap().is_empty());
    }

    #[test]
    fn qrels_validation_catches_unknown_ids() {
        let corpus = Corpus::from_passages(vec![Passage {
            id: did("d1"),
            title: String::new(),
            text: "t".into(),
        }])
        .unwrap();
        let queries =
            QuerySet::from_queries(vec![Query { id: qid("q1"), text: "t".into() }]).unwrap();
        let mut qrels = Qrels::default();
        qrels.insert(qid("q1"), did("dX"), 1);
        assert!(matches!(
            qrels.validate_against(&queries, &corpus).unwrap_err(),
            IngestError::UnknownReference { kind: "doc", .. }
        ));
    }

    fn ten_queries() -> QuerySet {
        QuerySet::from_queries(
            (0..10).map(|i| Query { id: qid(&format!("q{i}")), text: format!("text {i}") }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn split_is_deterministic_and_sized() {
        let queries = ten_queries();
        let qrels = Qrels::default();
        let spec = SplitSpec::fraction_of_dev(0.8, 7);
        let a = split(&queries, &qrels, &spec).unwrap();
        let b = split(&queries, &qrels, &spec).unwrap();
        assert_eq!(a.train.len(), 8);
        assert_eq!(a.validation.len(), 2);
        assert_eq!(a.test.len(), 0);
        let ids = |s: &QuerySet| s.iter().map(|q| q.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.validation), ids(&b.validation));
    }

    #[test]
    fn split_partitions_without_overlap() {
        let queries = ten_queries();
        let spec = SplitSpec {
            mode: SplitMode::FractionOfDev,
            train_fraction: 0.6,
            test_fraction: 0.2,
            seed: 3,
        };
        let s = split(&queries, &Qrels::default(), &spec).unwrap();
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 10);
        for q in s.train.iter() {
            assert!(!s.validation.contains(&q.id) && !s.test.contains(&q.id));
        }
    }

    #[test]
    fn split_fraction_one_errors() {
        let queries = ten_queries();
        let spec = SplitSpec::fraction_of_dev(1.0, 7);
        assert!(matches!(
            split(&queries, &Qrels::default(), &spec).unwrap_err(),
            IngestError::InvalidSplit(_)
        ));
    }

    #[test]
    fn provided_splits_pass_through_untouched() {
        let queries = ten_queries();
        let train = QuerySet::from_queries(queries.queries()[..6].to_vec()).unwrap();
        let val = QuerySet::from_queries(queries.queries()[6..8].to_vec()).unwrap();
        let test = QuerySet::from_queries(queries.queries()[8..].to_vec()).unwrap();
        let splits = Splits::from_provided(train.clone(), val, test).unwrap();
        assert_eq!(splits.train.queries(), train.queries());
    }

    #[test]
    fn provided_splits_reject_overlap() {
        let queries = ten_queries();
        let train = QuerySet::from_queries(queries.queries()[..6].to_vec()).unwrap();
        let val = QuerySet::from_queries(queries.queries()[5..8].to_vec()).unwrap();
        let test = QuerySet::from_queries(queries.queries()[8..].to_vec()).unwrap();
        assert!(matches!(
            Splits::from_provided(train, val, test).unwrap_err(),
            IngestError::OverlappingSplits(_)
        ));
    }

    #[test]
    fn manifest_roundtrip_reproduces_splits() {
        let dir = tempfile::tempdir().unwrap();
        let queries = ten_queries();
        let spec = SplitSpec::fraction_of_dev(0.8, 7);
        let splits = split(&queries, &Qrels::default(), &spec).unwrap();
        let manifest = SplitManifest::from_splits(spec, &splits);
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        let reloaded = SplitManifest::load(&path).unwrap();
        assert_eq!(manifest, reloaded);
        let applied = reloaded.apply(&queries).unwrap();
        assert_eq!(applied.train.queries(), splits.train.queries());
    }
}
