//! In-memory domain knowledge base with lexical retrieval.
//!
//! The knowledge base holds short practice notes about query execution
//! (scan pruning, shuffle amplification, join skew, cluster sizing) plus
//! recorded feature experience. Retrieval is TF-IDF cosine over lowercase
//! word tokens: deterministic, dependency-free, and sufficient to decide
//! which feature-template families apply to a job. Query formulation turns
//! a job artifact into a keyword query from its detected operators and
//! table names.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, HistoryDataset, JobArtifact};

/// Default number of documents surfaced to the feature analyzer.
pub const DEFAULT_RETRIEVAL_K: usize = 6;

/// Errors from knowledge-base construction and retrieval.
#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("knowledge doc `{doc_id}` is invalid: {reason}")]
    InvalidDoc { doc_id: String, reason: String },
    #[error("duplicate knowledge doc id `{doc_id}`")]
    DuplicateDoc { doc_id: String },
    #[error("retrieval requires k >= 1, got {k}")]
    BadK { k: usize },
    #[error("knowledge base is empty")]
    EmptyKb,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("malformed knowledge doc at {path} line {line}: {source}")]
    Decode {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// One practice note or recorded feature experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeDoc {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub tags: Vec<String>,
}

impl KnowledgeDoc {
    pub fn validate(&self) -> Result<(), KnowledgeError> {
        if self.doc_id.is_empty() {
            return Err(KnowledgeError::InvalidDoc {
                doc_id: self.doc_id.clone(),
                reason: "doc_id is empty".into(),
            });
        }
        if self.body.trim().is_empty() {
            return Err(KnowledgeError::InvalidDoc {
                doc_id: self.doc_id.clone(),
                reason: "body is empty".into(),
            });
        }
        Ok(())
    }
}

/// One retrieval hit. Tags are carried along so downstream planners can
/// trigger on scenario markers without a handle to the knowledge base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedHit {
    pub doc_id: String,
    pub score: f64,
    pub snippet: String,
    pub tags: Vec<String>,
}

/// Ranked retrieval result; scores are non-increasing in rank.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub hits: Vec<RetrievedHit>,
}

impl RetrievedContext {
    /// True when a hit with a strictly positive score carries `tag`.
    /// Zero-score hits only pad the tail of the ranking and never count.
    pub fn has_tag(&self, tag: &str) -> bool {
        self.hits
            .iter()
            .any(|h| h.score > 0.0 && h.tags.iter().any(|t| t == tag))
    }
}

/// Immutable document store with precomputed term statistics.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    docs: Vec<KnowledgeDoc>,
    doc_terms: Vec<BTreeMap<String, f64>>,
    doc_freq: BTreeMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(docs: Vec<KnowledgeDoc>) -> Result<Self, KnowledgeError> {
        let mut seen = std::collections::BTreeSet::new();
        for doc in &docs {
            doc.validate()?;
            if !seen.insert(doc.doc_id.clone()) {
                return Err(KnowledgeError::DuplicateDoc {
                    doc_id: doc.doc_id.clone(),
                });
            }
        }
        let doc_terms: Vec<BTreeMap<String, f64>> = docs
            .iter()
            .map(|d| term_counts(&format!("{} {}", d.title, d.body)))
            .collect();
        let mut doc_freq = BTreeMap::new();
        for terms in &doc_terms {
            for term in terms.keys() {
                *doc_freq.entry(term.clone()).or_insert(0) += 1;
            }
        }
        Ok(Self {
            docs,
            doc_terms,
            doc_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[KnowledgeDoc] {
        &self.docs
    }

    /// Appends a document, e.g. recorded feature experience. Rebuilds term
    /// statistics; the base is otherwise immutable after load.
    pub fn push(&mut self, doc: KnowledgeDoc) -> Result<(), KnowledgeError> {
        let mut docs = self.docs.clone();
        docs.push(doc);
        *self = Self::new(docs)?;
        Ok(())
    }

    /// Top-`k` documents by TF-IDF cosine similarity to `query`.
    ///
    /// Term weight is count * ln(n_docs / doc_freq); query terms absent
    /// from every document are ignored. Ties break by doc_id ascending, so
    /// zero-score documents pad the tail in a stable order.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<RetrievedContext, KnowledgeError> {
        if k < 1 {
            return Err(KnowledgeError::BadK { k });
        }
        if self.docs.is_empty() {
            return Err(KnowledgeError::EmptyKb);
        }
        let query_terms = term_counts(query);
        let query_vec: BTreeMap<&String, f64> = query_terms
            .iter()
            .filter_map(|(term, count)| {
                let idf = self.idf(term)?;
                Some((term, count * idf))
            })
            .collect();
        let query_norm = norm(query_vec.values());

        let mut scored: Vec<(usize, f64)> = (0..self.docs.len())
            .map(|i| (i, self.cosine(&query_vec, query_norm, i)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.docs[a.0].doc_id.cmp(&self.docs[b.0].doc_id))
        });
        let hits = scored
            .into_iter()
            .take(k)
            .map(|(i, score)| {
                let doc = &self.docs[i];
                RetrievedHit {
                    doc_id: doc.doc_id.clone(),
                    score,
                    snippet: snippet(&doc.body),
                    tags: doc.tags.clone(),
                }
            })
            .collect();
        Ok(RetrievedContext { hits })
    }

    fn idf(&self, term: &str) -> Option<f64> {
        let df = *self.doc_freq.get(term)?;
        Some((self.docs.len() as f64 / df as f64).ln())
    }

    fn cosine(&self, query_vec: &BTreeMap<&String, f64>, query_norm: f64, doc: usize) -> f64 {
        if query_norm == 0.0 {
            return 0.0;
        }
        let terms = &self.doc_terms[doc];
        let mut dot = 0.0;
        let mut doc_norm_sq = 0.0;
        for (term, count) in terms {
            let idf = self.idf(term).unwrap_or(0.0);
            let w = count * idf;
            doc_norm_sq += w * w;
            if let Some(qw) = query_vec.get(term) {
                dot += qw * w;
            }
        }
        if doc_norm_sq == 0.0 {
            return 0.0;
        }
        dot / (query_norm * doc_norm_sq.sqrt())
    }

    /// Loads a knowledge base from a JSONL file of documents.
    pub fn load_jsonl(path: &Path) -> Result<Self, KnowledgeError> {
        let file = fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut docs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc = serde_json::from_str(&line).map_err(|source| KnowledgeError::Decode {
                path: path.display().to_string(),
                line: i + 1,
                source,
            })?;
            docs.push(doc);
        }
        Self::new(docs)
    }

    /// Writes the documents as JSONL, one per line.
    pub fn save_jsonl(&self, path: &Path) -> Result<(), KnowledgeError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for doc in &self.docs {
            let line = serde_json::to_string(doc).expect("doc serializes");
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Builds a keyword query for a job from its operators and table names.
///
/// An empty script yields the table names alone. Otherwise detected
/// operators append fixed keyword groups: joins add "join", a skewed join
/// table adds "join skew straggler", GROUP BY adds "group by shuffle", and
/// any filtered scan adds "partition filter pruning selectivity scan".
pub fn formulate_query(artifact: &JobArtifact) -> String {
    let job = &artifact.job;
    let mut parts: Vec<String> = job.scanned_tables.iter().map(|s| s.table.clone()).collect();
    if job.sql_text.trim().is_empty() {
        return parts.join(" ");
    }
    if job.has_join {
        parts.push("join".into());
    }
    if job.skew_table.is_some() {
        parts.push("join skew straggler".into());
    }
    if job.has_group_by {
        parts.push("group by shuffle".into());
    }
    if job.scanned_tables.iter().any(|s| s.selectivity < 1.0) {
        parts.push("partition filter pruning selectivity scan".into());
    }
    parts.join(" ")
}

/// Retrieval context covering a whole workload: one query per job, hits
/// merged by document keeping the best score, ranked by (score, doc_id).
pub fn workload_context(
    dataset: &HistoryDataset,
    kb: &KnowledgeBase,
    k: usize,
) -> Result<RetrievedContext, KnowledgeError> {
    let mut best: BTreeMap<String, RetrievedHit> = BTreeMap::new();
    for job in &dataset.jobs {
        let artifact =
            JobArtifact::for_scheduling(dataset, &job.job_id, dataset.fleet[0].clone(), i64::MAX)?;
        let query = formulate_query(&artifact);
        for hit in kb.retrieve(&query, k)?.hits {
            match best.get(&hit.doc_id) {
                Some(seen) if seen.score >= hit.score => {}
                _ => {
                    best.insert(hit.doc_id.clone(), hit);
                }
            }
        }
    }
    let mut hits: Vec<_> = best.into_values().collect();
    hits.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.doc_id.cmp(&b.doc_id)));
    Ok(RetrievedContext { hits })
}

/// The shipped seed knowledge base: execution practice notes covering the
/// scenarios the feature templates are built for.
pub fn seed_kb() -> KnowledgeBase {
    let docs = vec![
        doc(
            "kb-partition-pruning",
            "Partition filter pruning and selectivity",
            "A partition filter prunes the scan before execution. Estimate the \
             predicate selectivity per table in a sandbox explain run; a low \
             selectivity scan reads a small fraction of the table bytes. Probe \
             the selectivity of each scanned table when filters are present.",
            &["scenario", "selectivity"],
        ),
        doc(
            "kb-scan-bytes",
            "Scan bytes drive scan time",
            "Scan time scales with bytes read. Multiply table bytes by the \
             estimated selectivity to approximate the scan bytes per table, \
             then sum over scanned tables. Partition filter pruning shrinks \
             the scan; selectivity probes make the estimate concrete.",
            &["scenario", "scan", "selectivity"],
        ),
        doc(
            "kb-join-skew",
            "Join skew and stragglers",
            "A join on a skewed key creates stragglers: one hot key routes \
             most shuffle rows to a single task, and the max task duration \
             dominates the stage wall time. Watch for a skew straggler when a \
             join touches a table with few distinct keys.",
            &["scenario", "skew"],
        ),
        doc(
            "kb-shuffle-groupby",
            "Shuffle cost of group by and join",
            "Group by and join operators shuffle data across the network. \
             Shuffle bytes grow with scan bytes times an amplification factor; \
             plans that underestimate shuffle underestimate network and \
             compute cost. Estimate shuffle from the scan and the plan shape.",
            &["scenario", "shuffle"],
        ),
        doc(
            "kb-plan-complexity",
            "Plan complexity counts",
            "The query plan summary reports operator counts: joins, group by \
             aggregations, scans, and predicates. Plans with more join and \
             group by operators shuffle more and run longer; the counts are \
             cheap plan features.",
            &["scenario", "plan"],
        ),
        doc(
            "kb-history-lag",
            "History lag features",
            "The strongest predictor of a recurring job is its own history: \
             the previous run duration, a shifted average over the last runs, \
             and the resources of prior runs. Lag features require at least \
             one completed prior run.",
            &["scenario", "history"],
        ),
        doc(
            "kb-cluster-sizing",
            "Cluster sizing tradeoffs",
            "Worker count divides the scan and shuffle work: more workers cut \
             wall time but raise the price per second. The cluster config of \
             the scheduled run (workers, photon, instance) is known before \
             execution and is a free feature.",
            &["scenario", "config"],
        ),
        doc(
            "kb-photon",
            "Photon acceleration",
            "A photon runtime multiplies per-worker scan throughput, \
             shortening scan-heavy jobs at a higher price per second. The \
             photon flag interacts with bytes scanned per worker.",
            &["scenario", "config"],
        ),
        doc(
            "kb-cost-dbu",
            "Run cost and SLO-aware config choice",
            "Run cost equals the price per second times the duration. Given a \
             duration prediction per candidate config, pick the cheapest \
             config whose predicted duration meets the SLO cutoff.",
            &["scenario", "cost"],
        ),
        doc(
            "kb-leakage",
            "Outcome leakage in prerun features",
            "Never feed current-run outcomes into a prerun predictor. Stage \
             wall times of the run being predicted sum to its duration, so \
             any feature reading the current run's metrics reconstructs the \
             label. Historical runs are safe; the scheduled run is not.",
            &["practice", "leakage"],
        ),
        doc(
            "kb-missing-defaults",
            "Typed defaults and normalization",
            "Every feature declares a typed default for missing values. \
             Numeric features are z-scored with population statistics frozen \
             at training time; categorical features are one-hot encoded with \
             a capped vocabulary and an overflow bucket.",
            &["practice", "normalization"],
        ),
        doc(
            "kb-tool-caching",
            "Tool result caching",
            "Cache tool results keyed by the job signature, data snapshot, \
             feature version, and tool version. Replays hit the cache and \
             cost nothing against the sandbox budget; any key component bump \
             invalidates the entry.",
            &["practice", "caching"],
        ),
        doc(
            "kb-drift-detection",
            "Drift detection",
            "A population stability index over quantile bins detects covariate \
             drift against the training reference; a rolling error ratio over \
             recent runs detects model regression. Either signal triggers a \
             retrain on a fresh snapshot.",
            &["practice", "drift"],
        ),
        doc(
            "kb-feature-experience",
            "Recorded feature experience",
            "Experience from batch ETL workloads: the scan bytes estimate \
             ranks top by gain importance when scans dominate; selectivity \
             probes pay off on filtered scans; lag features carry recurring \
             jobs. Drop one of two features that are exactly correlated.",
            &["experience"],
        ),
    ];
    KnowledgeBase::new(docs).expect("seed kb is valid")
}

fn doc(id: &str, title: &str, body: &str, tags: &[&str]) -> KnowledgeDoc {
    KnowledgeDoc {
        doc_id: id.into(),
        title: title.into(),
        body: body.into(),
        tags: tags.iter().map(|t| t.to_string()).collect(),
    }
}

/// Lowercase word tokens: runs of alphanumerics and underscores.
fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        let ch = ch.to_ascii_lowercase();
        if ch.is_ascii_alphanumeric() || ch == '_' {
            current.push(ch);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn term_counts(text: &str) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    for token in tokenize(text) {
        *counts.entry(token).or_insert(0.0) += 1.0;
    }
    counts
}

fn norm<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

fn snippet(body: &str) -> String {
    const SNIPPET_CHARS: usize = 120;
    if body.chars().count() <= SNIPPET_CHARS {
        body.to_string()
    } else {
        let cut: String = body.chars().take(SNIPPET_CHARS).collect();
        format!("{cut}...")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSpec;

    fn toy_kb() -> KnowledgeBase {
        KnowledgeBase::new(vec![
            KnowledgeDoc {
                doc_id: "d1".into(),
                title: String::new(),
                body: "partition pruning scan".into(),
                tags: vec![],
            },
            KnowledgeDoc {
                doc_id: "d2".into(),
                title: String::new(),
                body: "join skew straggler".into(),
                tags: vec![],
            },
        ])
        .unwrap()
    }

    #[test]
    fn two_doc_cosine_matches_hand_computation() {
        // Every term occurs in exactly one of the two docs, so idf = ln 2
        // throughout. Query "partition pruning" overlaps d1 in two of its
        // three terms: cosine = 2 / (sqrt(2) * sqrt(3)) = sqrt(2/3).
        let kb = toy_kb();
        let ctx = kb.retrieve("partition pruning", 2).unwrap();
        assert_eq!(ctx.hits[0].doc_id, "d1");
        assert!((ctx.hits[0].score - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(ctx.hits[1].doc_id, "d2");
        assert_eq!(ctx.hits[1].score, 0.0);
        assert!(ctx.hits[0].score > ctx.hits[1].score);
    }

    #[test]
    fn query_equal_to_body_ranks_that_doc_first() {
        let kb = seed_kb();
        for doc in kb.docs() {
            let ctx = kb.retrieve(&doc.body, 1).unwrap();
            assert_eq!(ctx.hits[0].doc_id, doc.doc_id, "self-match for {}", doc.doc_id);
        }
    }

    #[test]
    fn oversized_k_returns_all_docs_with_monotone_scores() {
        let kb = seed_kb();
        let ctx = kb.retrieve("shuffle join scan", kb.len() + 10).unwrap();
        assert_eq!(ctx.hits.len(), kb.len());
        for pair in ctx.hits.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn zero_k_is_rejected_and_empty_kb_is_rejected() {
        let kb = seed_kb();
        assert!(matches!(kb.retrieve("x", 0), Err(KnowledgeError::BadK { k: 0 })));
        assert!(matches!(
            KnowledgeBase::new(vec![]).unwrap().retrieve("x", 1),
            Err(KnowledgeError::EmptyKb)
        ));
    }

    #[test]
    fn score_ties_break_by_doc_id() {
        let twin = |id: &str| KnowledgeDoc {
            doc_id: id.into(),
            title: String::new(),
            body: "identical body text".into(),
            tags: vec![],
        };
        let kb = KnowledgeBase::new(vec![twin("zz"), twin("aa"), twin("mm")]).unwrap();
        let ctx = kb.retrieve("unrelated query", 3).unwrap();
        let ids: Vec<&str> = ctx.hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(ids, ["aa", "mm", "zz"]);
    }

    #[test]
    fn query_formulation_reflects_operators() {
        let dataset = CorpusSpec {
            n_tables: 6,
            n_jobs: 30,
            runs_per_job: 2,
            ..CorpusSpec::default()
        }
        .generate()
        .unwrap();
        let config = dataset.fleet[0].clone();
        let with_gb = dataset.jobs.iter().find(|j| j.has_group_by).unwrap();
        let artifact =
            JobArtifact::for_scheduling(&dataset, &with_gb.job_id, config.clone(), 10_000_000_000)
                .unwrap();
        let query = formulate_query(&artifact);
        assert!(query.contains("group by shuffle"), "query: {query}");
        for scanned in &with_gb.scanned_tables {
            assert!(query.contains(&scanned.table));
        }

        let with_skew = dataset.jobs.iter().find(|j| j.skew_table.is_some()).unwrap();
        let artifact =
            JobArtifact::for_scheduling(&dataset, &with_skew.job_id, config, 10_000_000_000)
                .unwrap();
        assert!(formulate_query(&artifact).contains("join skew"));

        let mut plain = artifact.clone();
        plain.job.sql_text = String::new();
        let names: Vec<String> = plain.job.scanned_tables.iter().map(|s| s.table.clone()).collect();
        assert_eq!(formulate_query(&plain), names.join(" "));
    }

    #[test]
    fn seed_kb_covers_required_scenarios() {
        let kb = seed_kb();
        assert!(kb.len() >= 12);
        for tag in ["selectivity", "scan", "shuffle", "plan", "skew", "history", "config", "cost"] {
            assert!(
                kb.docs().iter().any(|d| d.tags.iter().any(|t| t == tag)),
                "no doc tagged {tag}"
            );
        }
    }

    #[test]
    fn operator_query_surfaces_scenario_docs_with_tags() {
        let kb = seed_kb();
        let ctx = kb
            .retrieve(
                "t_00 t_01 join join skew straggler group by shuffle \
                 partition filter pruning selectivity scan",
                DEFAULT_RETRIEVAL_K,
            )
            .unwrap();
        for tag in ["selectivity", "scan", "shuffle", "plan", "skew"] {
            assert!(ctx.has_tag(tag), "missing tag {tag} in {:?}", ctx.hits);
        }
    }

    #[test]
    fn scan_only_query_surfaces_selectivity_and_scan() {
        let kb = seed_kb();
        let ctx = kb
            .retrieve(
                "t_02 partition filter pruning selectivity scan",
                DEFAULT_RETRIEVAL_K,
            )
            .unwrap();
        assert!(ctx.has_tag("selectivity"));
        assert!(ctx.has_tag("scan"));
    }

    #[test]
    fn jsonl_round_trip_preserves_docs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let kb = seed_kb();
        kb.save_jsonl(&path).unwrap();
        let reloaded = KnowledgeBase::load_jsonl(&path).unwrap();
        assert_eq!(kb.docs(), reloaded.docs());
    }

    #[test]
    fn duplicate_and_empty_docs_are_rejected() {
        let d = doc("same", "t", "body", &[]);
        assert!(matches!(
            KnowledgeBase::new(vec![d.clone(), d.clone()]),
            Err(KnowledgeError::DuplicateDoc { .. })
        ));
        let empty = doc("e", "t", "   ", &[]);
        assert!(matches!(
            KnowledgeBase::new(vec![empty]),
            Err(KnowledgeError::InvalidDoc { .. })
        ));
    }
}
