//! Recall@K and NDCG@K over ranked lists, with graded relevance.
//!
//! Recall@K = |top-K docs with label > 0| / |docs with label > 0|.
//! DCG@K = sum over positions i = 1..K of (2^rel_i - 1) / log2(i + 1);
//! NDCG@K divides by the ideal DCG computed from all judged docs sorted by
//! label descending (trec-style), truncated at K. Queries with no relevant
//! documents are excluded from means and counted separately — silently
//! scoring them 0 would deflate every average.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Corpus, Qrels, QuerySet};
use crate::scoring::{RankedList, ScoreError, Scorer};
use crate::vector::QueryId;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cutoffs must be non-empty, ascending and unique, got {0:?}")]
    BadCutoffs(Vec<usize>),
    #[error("no queries were evaluated (all lacked relevant documents?)")]
    NoEvaluatedQueries,
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Recall,
    Ndcg,
}

impl Metric {
    pub fn label(&self, k: usize) -> String {
        match self {
            Metric::Recall => format!("Recall@{k}"),
            Metric::Ndcg => format!("NDCG@{k}"),
        }
    }
}

/// A metric with its cutoff list (ascending, unique).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub metric: Metric,
    pub cutoffs: Vec<usize>,
}

impl MetricSpec {
    pub fn new(metric: Metric, cutoffs: Vec<usize>) -> Result<Self, EvalError> {
        if cutoffs.is_empty()
            || cutoffs.iter().any(|&k| k == 0)
            || cutoffs.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(EvalError::BadCutoffs(cutoffs));
        }
        Ok(Self { metric, cutoffs })
    }

    /// Recall and NDCG at the same cutoffs.
    pub fn both(cutoffs: &[usize]) -> Result<Vec<MetricSpec>, EvalError> {
        Ok(vec![
            MetricSpec::new(Metric::Recall, cutoffs.to_vec())?,
            MetricSpec::new(Metric::Ndcg, cutoffs.to_vec())?,
        ])
    }
}

fn judged<'q>(qrels: &'q Qrels, query: &QueryId) -> Option<&'q BTreeMap<crate::vector::DocId, u32>> {
    qrels.docs_for(query)
}

/// Fraction of the query's relevant docs found in the top K. `None` when the
/// query has no relevant docs (excluded, not zero).
pub fn recall_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> Option<f64> {
    let docs = judged(qrels, &ranked.query_id)?;
    let total_relevant = docs.values().filter(|&&y| y > 0).count();
    if total_relevant == 0 {
        return None;
    }
    let hit = ranked
        .entries
        .iter()
        .take(k)
        .filter(|(d, _)| docs.get(d).copied().unwrap_or(0) > 0)
        .count();
    Some(hit as f64 / total_relevant as f64)
}

/// Discounted cumulative gain over the first K positions (1-based), with
/// exponential gain 2^rel - 1. Unjudged docs carry relevance 0.
pub fn dcg_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> f64 {
    ranked
        .entries
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, (doc, _))| {
            let rel = qrels.relevance(&ranked.query_id, doc);
            gain(rel) / ((i + 2) as f64).log2()
        })
        .sum()
}

fn gain(rel: u32) -> f64 {
    2f64.powi(rel as i32) - 1.0
}

/// DCG normalized by the ideal DCG over all judged docs (labels descending,
/// truncated at K). `None` when the ideal DCG is zero.
pub fn ndcg_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> Option<f64> {
    let docs = judged(qrels, &ranked.query_id)?;
    let mut labels: Vec<u32> = docs.values().copied().collect();
    labels.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = labels
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &rel)| gain(rel) / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        return None;
    }
    Some(dcg_at_k(ranked, qrels, k) / idcg)
}

/// Mean metrics over a query set for one scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    /// Mean values keyed by metric label ("Recall@5", "NDCG@10", ...).
    pub means: BTreeMap<String, f64>,
    /// Per-query values, same keys.
    pub per_query: BTreeMap<QueryId, BTreeMap<String, f64>>,
    /// Queries contributing to the means.
    pub evaluated: usize,
    /// Queries excluded for lack of relevant documents.
    pub excluded: usize,
    pub timestamp: String,
}

impl EvalReport {
    pub fn mean(&self, metric: Metric, k: usize) -> Option<f64> {
        self.means.get(&metric.label(k)).copied()
    }
}

fn now_iso8601() -> String {
    // Seconds since the epoch; enough for report provenance without a
    // date-time dependency.
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

/// Compute metrics from already-retrieved ranked lists.
pub fn evaluate_ranked(
    scorer_name: &str,
    lists: &[RankedList],
    qrels: &Qrels,
    specs: &[MetricSpec],
) -> Result<EvalReport, EvalError> {
    for spec in specs {
        // re-validate: specs may have been deserialized
        MetricSpec::new(spec.metric, spec.cutoffs.clone())?;
    }
    let mut per_query: BTreeMap<QueryId, BTreeMap<String, f64>> = BTreeMap::new();
    let mut excluded = 0usize;
    for list in lists {
        let mut row = BTreeMap::new();
        let mut skip = false;
        for spec in specs {
            for &k in &spec.cutoffs {
                let value = match spec.metric {
                    Metric::Recall => recall_at_k(list, qrels, k),
                    Metric::Ndcg => ndcg_at_k(list, qrels, k),
                };
                match value {
                    Some(v) => {
                        row.insert(spec.metric.label(k), v);
                    }
                    None => skip = true,
                }
            }
        }
        if skip {
            excluded += 1;
        } else {
            per_query.insert(list.query_id.clone(), row);
        }
    }
    if per_query.is_empty() {
        return Err(EvalError::NoEvaluatedQueries);
    }
    let mut means: BTreeMap<String, f64> = BTreeMap::new();
    for spec in specs {
        for &k in &spec.cutoffs {
            let label = spec.metric.label(k);
            let total: f64 = per_query.values().map(|row| row[&label]).sum();
            means.insert(label, total / per_query.len() as f64);
        }
    }
    let evaluated = per_query.len();
    Ok(EvalReport {
        scorer: scorer_name.to_string(),
        means,
        per_query,
        evaluated,
        excluded,
        timestamp: now_iso8601(),
    })
}

/// Retrieve once per query at the maximum cutoff, then compute every metric
/// from that single ranked list.
pub fn evaluate(
    scorer: &Scorer,
    queries: &QuerySet,
    corpus: &Corpus,
    qrels: &Qrels,
    specs: &[MetricSpec],
) -> Result<(EvalReport, Vec<RankedList>), EvalError> {
    let max_k = specs.iter().flat_map(|s| s.cutoffs.iter()).copied().max().unwrap_or(0);
    if max_k == 0 {
        return Err(EvalError::BadCutoffs(vec![]));
    }
    let depth = max_k.min(corpus.len()).max(1);
    let index = scorer.index_corpus(corpus)?;
    let mut lists = Vec::with_capacity(queries.len());
    for query in queries.iter() {
        lists.push(scorer.retrieve_topk(&index, &query.id, &query.text, depth)?);
    }
    let report = evaluate_ranked(scorer.kind().as_str(), &lists, qrels, specs)?;
    Ok((report, lists))
}

/// Aligned text table, one row per scorer, one column per metric.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut columns: Vec<String> = Vec::new();
    for report in reports {
        for label in report.means.keys() {
            if !columns.contains(label) {
                columns.push(label.clone());
            }
        }
    }
    // Recall columns first, then NDCG, each by ascending K.
    columns.sort_by_key(|label| {
        let (prefix, k) = label.split_once('@').unwrap_or((label, "0"));
        (prefix != "Recall", k.parse::<usize>().unwrap_or(0))
    });

    let mut widths: Vec<usize> = columns.iter().map(|c| c.len().max(9)).collect();
    let name_width = reports.iter().map(|r| r.scorer.len()).max().unwrap_or(5).max(6);
    let mut out = String::new();
    out.push_str(&format!("{:<name_width$}", "scorer"));
    for (label, w) in columns.iter().zip(&widths) {
        out.push_str(&format!("  {label:>w$}"));
    }
    out.push('\n');
    for report in reports {
        out.push_str(&format!("{:<name_width$}", report.scorer));
        for (label, w) in columns.iter().zip(&mut widths) {
            match report.means.get(label) {
                Some(v) => out.push_str(&format!("  {:>w$.5}", v, w = *w)),
                None => out.push_str(&format!("  {:>w$}", "-", w = *w)),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::{DocId, RelevanceScore};

    fn qid(s: &str) -> QueryId {
        QueryId::new(s).unwrap()
    }

    fn did(s: &str) -> DocId {
        DocId::new(s).unwrap()
    }

    fn ranked(query: &str, docs: &[&str]) -> RankedList {
        RankedList {
            query_id: qid(query),
            entries: docs
                .iter()
                .enumerate()
                .map(|(i, d)| (did(d), RelevanceScore(1.0 - i as f64 * 0.1)))
                .collect(),
        }
    }

    fn qrels_of(query: &str, pairs: &[(&str, u32)]) -> Qrels {
        let mut qrels = Qrels::default();
        for (doc, rel) in pairs {
            qrels.insert(qid(query), did(doc), *rel);
        }
        qrels
    }

    #[test]
    fn recall_basic() {
        let qrels = qrels_of("q", &[("a", 1), ("b", 1)]);
        let list = ranked("q", &["a", "x", "y"]);
        assert_eq!(recall_at_k(&list, &qrels, 3), Some(0.5));
        let list = ranked("q", &["a", "b", "y"]);
        assert_eq!(recall_at_k(&list, &qrels, 3), Some(1.0));
    }

    #[test]
    fn recall_excludes_queries_without_relevant_docs() {
        let qrels = qrels_of("q", &[("a", 0)]);
        let list = ranked("q", &["a", "b"]);
        assert_eq!(recall_at_k(&list, &qrels, 2), None);
        assert_eq!(recall_at_k(&ranked("other", &["a"]), &qrels, 1), None);
    }

    #[test]
    fn dcg_worked_values() {
        // rels in ranked order (2,1,0): 3/log2(2) + 1/log2(3) + 0
        let qrels = qrels_of("q", &[("a", 2), ("b", 1), ("c", 0)]);
        let list = ranked("q", &["a", "b", "c"]);
        assert!((dcg_at_k(&list, &qrels, 3) - 3.6309298).abs() < 1e-7);

        // rels (0,1,2): 0 + 1/log2(3) + 3/log2(4)
        let list = ranked("q", &["c", "b", "a"]);
        assert!((dcg_at_k(&list, &qrels, 3) - 2.1309298).abs() < 1e-7);

        let zeros = qrels_of("q", &[("a", 0), ("b", 0)]);
        assert_eq!(dcg_at_k(&ranked("q", &["a", "b"]), &zeros, 2), 0.0);
    }

    #[test]
    fn ndcg_worked_values() {
        let qrels = qrels_of("q", &[("a", 2), ("b", 1), ("c", 0)]);
        assert!((ndcg_at_k(&ranked("q", &["a", "b", "c"]), &qrels, 3).unwrap() - 1.0).abs() < 1e-12);
        let reversed = ndcg_at_k(&ranked("q", &["c", "b", "a"]), &qrels, 3).unwrap();
        assert!((reversed - 0.5868827).abs() < 1e-7, "{reversed}");
    }

    #[test]
    fn ndcg_binary_single_relevant_at_rank_one() {
        let qrels = qrels_of("q", &[("a", 1)]);
        assert_eq!(ndcg_at_k(&ranked("q", &["a", "b"]), &qrels, 2), Some(1.0));
    }

    #[test]
    fn ndcg_idcg_counts_unretrieved_judged_docs() {
        // two judged relevant docs, only one retrieved: ideal includes both
        let qrels = qrels_of("q", &[("a", 2), ("b", 2)]);
        let list = ranked("q", &["a", "x"]);
        let dcg = 3.0; // rank 1, gain 3
        let idcg = 3.0 + 3.0 / 3f64.log2();
        assert!((ndcg_at_k(&list, &qrels, 2).unwrap() - dcg / idcg).abs() < 1e-12);
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let qrels = qrels_of("q", &[("a", 1), ("b", 1), ("c", 2)]);
        let list = ranked("q", &["x", "a", "y", "b", "c"]);
        let mut last = 0.0;
        for k in 1..=5 {
            let r = recall_at_k(&list, &qrels, k).unwrap();
            assert!(r >= last);
            last = r;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn report_means_and_exclusions() {
        let mut qrels = qrels_of("q1", &[("a", 1)]);
        qrels.insert(qid("q2"), did("a"), 1);
        qrels.insert(qid("q3"), did("a"), 0); // no relevant docs: excluded
        let lists = vec![
            ranked("q1", &["a", "b"]), // Recall@1 = 1
            ranked("q2", &["b", "a"]), // Recall@1 = 0
            ranked("q3", &["a", "b"]),
        ];
        let specs = vec![MetricSpec::new(Metric::Recall, vec![1]).unwrap()];
        let report = evaluate_ranked("bb_only", &lists, &qrels, &specs).unwrap();
        assert_eq!(report.evaluated, 2);
        assert_eq!(report.excluded, 1);
        assert_eq!(report.means["Recall@1"], 0.5);
    }

    #[test]
    fn cutoff_validation() {
        assert!(MetricSpec::new(Metric::Recall, vec![]).is_err());
        assert!(MetricSpec::new(Metric::Recall, vec![3, 1]).is_err());
        assert!(MetricSpec::new(Metric::Recall, vec![1, 1]).is_err());
        assert!(MetricSpec::new(Metric::Recall, vec![0]).is_err());
        assert!(MetricSpec::new(Metric::Recall, vec![1, 3, 5]).is_ok());
    }

    /// Independent naive transcription of both metrics: set intersection for
    /// recall, direct formula sums for DCG/IDCG. No shared code with the
    /// implementations above.
    mod oracle {
        use super::*;

        pub fn recall(ranked: &RankedList, qrels: &Qrels, k: usize) -> Option<f64> {
            let judged = qrels.docs_for(&ranked.query_id)?;
            let relevant: std::collections::HashSet<&str> = judged
                .iter()
                .filter(|(_, &y)| y > 0)
                .map(|(d, _)| d.as_str())
                .collect();
            if relevant.is_empty() {
                return None;
            }
            let top: std::collections::HashSet<&str> =
                ranked.entries.iter().take(k).map(|(d, _)| d.as_str()).collect();
            Some(top.intersection(&relevant).count() as f64 / relevant.len() as f64)
        }

        pub fn ndcg(ranked: &RankedList, qrels: &Qrels, k: usize) -> Option<f64> {
            let judged = qrels.docs_for(&ranked.query_id)?;
            let mut dcg = 0.0;
            for (pos, (doc, _)) in ranked.entries.iter().enumerate().take(k) {
                let rel = judged.get(doc).copied().unwrap_or(0);
                dcg += (2f64.powf(f64::from(rel)) - 1.0) / ((pos as f64) + 2.0).log2();
            }
            let mut ideal: Vec<u32> = judged.values().copied().collect();
            ideal.sort_unstable_by(|a, b| b.cmp(a));
            let mut idcg = 0.0;
            for (pos, rel) in ideal.into_iter().enumerate().take(k) {
                idcg += (2f64.powf(f64::from(rel)) - 1.0) / ((pos as f64) + 2.0).log2();
            }
            if idcg == 0.0 {
                None
            } else {
                Some(dcg / idcg)
            }
        }
    }

    #[test]
    fn metrics_match_naive_oracle_on_random_instances() {
        use crate::rng::seeded_rng;
        use rand::Rng;
        let mut rng = seeded_rng(77);
        for case in 0..500 {
            let n_docs = rng.gen_range(3..30);
            let query = qid(&format!("q{case}"));
            let mut qrels = Qrels::default();
            for d in 0..n_docs {
                let rel = rng.gen_range(0..4u32);
                if rel > 0 || rng.gen_bool(0.3) {
                    qrels.insert(query.clone(), did(&format!("d{d}")), rel);
                }
            }
            let mut order: Vec<usize> = (0..n_docs).collect();
            crate::rng::shuffle(&mut order, &mut rng);
            let list = RankedList {
                query_id: query.clone(),
                entries: order
                    .iter()
                    .map(|&d| (did(&format!("d{d}")), RelevanceScore(rng.gen_range(-1.0..1.0))))
                    .collect(),
            };
            let k = rng.gen_range(1..=n_docs);
            match (recall_at_k(&list, &qrels, k), oracle::recall(&list, &qrels, k)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "recall {a} vs {b}"),
                (None, None) => {}
                (a, b) => panic!("recall exclusion mismatch: {a:?} vs {b:?}"),
            }
            match (ndcg_at_k(&list, &qrels, k), oracle::ndcg(&list, &qrels, k)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "ndcg {a} vs {b}"),
                (None, None) => {}
                (a, b) => panic!("ndcg exclusion mismatch: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn table_renders_rows_per_scorer() {
        let mut means = BTreeMap::new();
        means.insert("Recall@1".to_string(), 0.5);
        means.insert("NDCG@5".to_string(), 0.75);
        let report = EvalReport {
            scorer: "bb_only".into(),
            means,
            per_query: BTreeMap::new(),
            evaluated: 2,
            excluded: 0,
            timestamp: String::new(),
        };
        let table = render_table(&[report.clone(), EvalReport { scorer: "mafin".into(), ..report }]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("Recall@1") && lines[0].contains("NDCG@5"));
        assert!(lines[1].starts_with("bb_only"));
        assert!(lines[2].starts_with("mafin"));
        let recall_pos = lines[0].find("Recall@1").unwrap();
        let ndcg_pos = lines[0].find("NDCG@5").unwrap();
        assert!(recall_pos < ndcg_pos, "Recall columns come first");
    }
}
