//! Inverted index with Okapi BM25 ranking.
//!
//! ```text
//! score(q, d) = Σ_{t ∈ set(q)} idf(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·dl/avgdl))
//! idf(t)      = ln((N − df + 0.5) / (df + 0.5) + 1)
//! ```
//!
//! The `+ 1` inside the logarithm keeps idf positive for terms that occur in
//! more than half of the documents.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Chunk;
use crate::error::{Error, Result};
use crate::tokenize::TokenizerOptions;
use crate::vector_index::{rank_order, ScoredChunk};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if self.k1.is_nan() || self.k1 < 0.0 {
            return Err(Error::config("fulltext.k1", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::config("fulltext.b", "must be within [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub chunk_id: String,
    pub tf: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    pub options: TokenizerOptions,
    /// Postings per term, sorted by chunk id.
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub doc_lengths: BTreeMap<String, usize>,
    pub n: usize,
    pub avgdl: f64,
}

impl InvertedIndex {
    pub fn build(chunks: &[Chunk], options: TokenizerOptions) -> Result<Self> {
        let mut doc_lengths = BTreeMap::new();
        let mut counts: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
        for chunk in chunks {
            let tokens = options.apply(&chunk.text);
            if doc_lengths.insert(chunk.chunk_id.clone(), tokens.len()).is_some() {
                return Err(Error::DuplicateId(chunk.chunk_id.clone()));
            }
            for t in tokens {
                *counts
                    .entry(t)
                    .or_default()
                    .entry(chunk.chunk_id.clone())
                    .or_insert(0) += 1;
            }
        }
        let postings = counts
            .into_iter()
            .map(|(term, per_doc)| {
                let list = per_doc
                    .into_iter()
                    .map(|(chunk_id, tf)| Posting { chunk_id, tf })
                    .collect();
                (term, list)
            })
            .collect();
        let n = doc_lengths.len();
        let avgdl = if n == 0 {
            0.0
        } else {
            doc_lengths.values().sum::<usize>() as f64 / n as f64
        };
        Ok(InvertedIndex {
            options,
            postings,
            doc_lengths,
            n,
            avgdl,
        })
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n as f64;
        let df = self.df(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn tf(&self, term: &str, chunk_id: &str) -> u32 {
        self.postings.get(term).map_or(0, |list| {
            list.binary_search_by(|p| p.chunk_id.as_str().cmp(chunk_id))
                .map_or(0, |i| list[i].tf)
        })
    }

    /// Distinct query terms after normalization, in sorted order.
    pub fn query_terms(&self, query: &str) -> BTreeSet<String> {
        self.options.apply(query).into_iter().collect()
    }

    fn term_score(&self, params: &Bm25Params, term: &str, tf: u32, dl: usize) -> f64 {
        if tf == 0 {
            return 0.0;
        }
        let tf = f64::from(tf);
        let norm = 1.0 - params.b + params.b * dl as f64 / self.avgdl;
        self.idf(term) * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
    }

    pub fn bm25_score<S: AsRef<str>>(
        &self,
        params: &Bm25Params,
        query_terms: &[S],
        chunk_id: &str,
    ) -> Result<f64> {
        let dl = *self
            .doc_lengths
            .get(chunk_id)
            .ok_or_else(|| Error::UnknownChunk(chunk_id.to_string()))?;
        let terms: BTreeSet<&str> = query_terms.iter().map(AsRef::as_ref).collect();
        Ok(terms
            .into_iter()
            .map(|t| self.term_score(params, t, self.tf(t, chunk_id), dl))
            .sum())
    }

    pub fn search_keyword(&self, params: &Bm25Params, query: &str, k: usize) -> Vec<ScoredChunk> {
        let terms = self.query_terms(query);
        let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            for p in list {
                let dl = self.doc_lengths[&p.chunk_id];
                *scores.entry(&p.chunk_id).or_insert(0.0) += self.term_score(params, term, p.tf, dl);
            }
        }
        let mut hits: Vec<ScoredChunk> = scores
            .into_iter()
            .filter(|(_, s)| *s > 0.0)
            .map(|(id, score)| ScoredChunk {
                chunk_id: id.to_string(),
                score,
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        hits
    }

    /// Canonical JSON (sorted keys, pretty-printed) so snapshots diff cleanly.
    pub fn to_canonical_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn snapshot(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_canonical_json()?)?;
        Ok(())
    }

    pub fn restore(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::CorruptSnapshot(format!("{}: {e}", path.display())))?;
        let index: InvertedIndex = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptSnapshot(format!("{}: {e}", path.display())))?;
        if index.n != index.doc_lengths.len() {
            return Err(Error::CorruptSnapshot("document count disagrees with doc_lengths".into()));
        }
        Ok(index)
    }
}

pub fn index_chunks(chunks: &[Chunk]) -> Result<InvertedIndex> {
    InvertedIndex::build(chunks, TokenizerOptions::default())
}
