//! Inverted index and BM25+ ranking over flattened table documents.
//!
//! Scoring follows the lower-bounded BM25 variant: each matching term
//! contributes `idf * (tf_norm + delta)`, with
//! `idf = ln((N - df + 0.5) / (df + 0.5) + 1)` and
//! `tf_norm = tf*(k1+1) / (tf + k1*(1 - b + b*dl/avgdl))`. The delta term
//! applies only to terms actually present in the document, so ranking still
//! separates documents that contain a query term from those that do not.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;

/// BM25+ parameters. Defaults are the literature-standard values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    /// Term-frequency saturation, must be positive.
    pub k1: f64,
    /// Length normalization in [0, 1].
    pub b: f64,
    /// Lower-bound bonus for present terms, non-negative.
    pub delta: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: 1.2,
            b: 0.75,
            delta: 1.0,
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(self.k1 > 0.0) {
            return Err(RetrievalError::InvalidParams("k1 must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(RetrievalError::InvalidParams("b must be in [0, 1]".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(RetrievalError::InvalidParams("delta must be >= 0".into()));
        }
        Ok(())
    }
}

/// A search hit: table id plus its BM25+ score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub table_id: String,
    pub score: f64,
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate table_id {0:?} in index input")]
    DuplicateDocId(String),
    #[error("document ordinal {0} out of range (index has {1} docs)")]
    BadOrdinal(usize, usize),
    #[error("top_k must be >= 1, got {0}")]
    BadTopK(usize),
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
}

/// Lowercase and split on maximal runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

/// Immutable inverted index over a set of documents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bm25Index {
    /// term -> postings (doc ordinal, term frequency), ordinals ascending.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    doc_len: Vec<u32>,
    avgdl: f64,
    doc_ids: Vec<String>,
    params: Bm25Params,
}

impl Bm25Index {
    /// Build the index. `docs` pairs each table id with its flattened text.
    pub fn build<S: AsRef<str>, T: AsRef<str>>(
        docs: &[(S, T)],
        params: Bm25Params,
    ) -> Result<Bm25Index, RetrievalError> {
        params.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for (id, _) in docs {
            if !seen.insert(id.as_ref().to_string()) {
                return Err(RetrievalError::DuplicateDocId(id.as_ref().to_string()));
            }
        }
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        let mut doc_ids = Vec::with_capacity(docs.len());
        let mut total_len: u64 = 0;
        for (ord, (id, text)) in docs.iter().enumerate() {
            let tokens = tokenize(text.as_ref());
            total_len += tokens.len() as u64;
            doc_len.push(tokens.len() as u32);
            doc_ids.push(id.as_ref().to_string());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for tok in tokens {
                *tf.entry(tok).or_insert(0) += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((ord as u32, count));
            }
        }
        let avgdl = if docs.is_empty() {
            0.0
        } else {
            total_len as f64 / docs.len() as f64
        };
        Ok(Bm25Index {
            postings,
            doc_len,
            avgdl,
            doc_ids,
            params,
        })
    }

    /// Convenience: index every table of a corpus by its flattened document.
    pub fn build_from_corpus(
        corpus: &Corpus,
        params: Bm25Params,
    ) -> Result<Bm25Index, RetrievalError> {
        let records = corpus
            .export_records()
            .map_err(|e| RetrievalError::InvalidParams(e.to_string()))?;
        let docs: Vec<(String, String)> = records
            .iter()
            .map(|r| (r.table_id.clone(), crate::corpus::flatten_document(r)))
            .collect();
        Bm25Index::build(&docs, params)
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_id(&self, ordinal: usize) -> Option<&str> {
        self.doc_ids.get(ordinal).map(|s| s.as_str())
    }

    fn term_freq(&self, term: &str, ordinal: u32) -> u32 {
        self.postings
            .get(term)
            .and_then(|p| {
                p.binary_search_by_key(&ordinal, |&(d, _)| d)
                    .ok()
                    .map(|i| p[i].1)
            })
            .unwrap_or(0)
    }

    /// BM25+ score of one document for the given query terms.
    pub fn score(&self, query_terms: &[String], ordinal: usize) -> Result<f64, RetrievalError> {
        if ordinal >= self.doc_ids.len() {
            return Err(RetrievalError::BadOrdinal(ordinal, self.doc_ids.len()));
        }
        let n = self.doc_ids.len() as f64;
        let dl = self.doc_len[ordinal] as f64;
        let Bm25Params { k1, b, delta } = self.params;
        let mut seen = std::collections::BTreeSet::new();
        let mut total = 0.0;
        for term in query_terms {
            if !seen.insert(term.as_str()) {
                continue; // distinct query terms only
            }
            let df = self.postings.get(term.as_str()).map_or(0, |p| p.len()) as f64;
            let tf = self.term_freq(term, ordinal as u32) as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            let tf_norm = (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / self.avgdl));
            total += idf * (tf_norm + delta);
        }
        Ok(total)
    }

    /// Top-k search. Only documents containing at least one query term are
    /// returned, sorted by score descending, ties broken by table_id ascending.
    pub fn search(&self, keywords: &str, top_k: usize) -> Result<Vec<ScoredHit>, RetrievalError> {
        if top_k < 1 {
            return Err(RetrievalError::BadTopK(top_k));
        }
        let query = tokenize(keywords);
        if query.is_empty() || self.doc_ids.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.doc_ids.len() as f64;
        let Bm25Params { k1, b, delta } = self.params;
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        let mut seen = std::collections::BTreeSet::new();
        for term in &query {
            if !seen.insert(term.as_str()) {
                continue;
            }
            if let Some(postings) = self.postings.get(term.as_str()) {
                let df = postings.len() as f64;
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                for &(ord, tf) in postings {
                    let dl = self.doc_len[ord as usize] as f64;
                    let tf = tf as f64;
                    let tf_norm =
                        (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / self.avgdl));
                    *acc.entry(ord).or_insert(0.0) += idf * (tf_norm + delta);
                }
            }
        }
        let mut hits: Vec<ScoredHit> = acc
            .into_iter()
            .filter(|&(_, score)| score > 0.0)
            .map(|(ord, score)| ScoredHit {
                table_id: self.doc_ids[ord as usize].clone(),
                score,
            })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.table_id.cmp(&b.table_id))
        });
        hits.truncate(top_k);
        Ok(hits)
    }
}

/// Render hits for the agent: one line per hit with the queryable physical
/// name, titles, and column list. Format is fixed so transcripts stay
/// deterministic.
pub fn render_search_results(hits: &[ScoredHit], corpus: &Corpus) -> String {
    if hits.is_empty() {
        return "(no results)".to_string();
    }
    let mut lines = Vec::with_capacity(hits.len());
    for (i, hit) in hits.iter().enumerate() {
        match corpus.meta(&hit.table_id) {
            Some(meta) => lines.push(format!(
                "{}. {} | {} / {} | columns: {}",
                i + 1,
                meta.physical_name,
                meta.page_title,
                meta.section_title,
                meta.columns.join(", ")
            )),
            None => lines.push(format!("{}. {} | (unknown table)", i + 1, hit.table_id)),
        }
    }
    lines.join("\n")
}
