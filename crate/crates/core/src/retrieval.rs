//! Query fan-out across the four stores, score fusion, reranking and parent
//! context expansion.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::corpus::{Chunk, Corpus};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::fulltext::{Bm25Params, InvertedIndex};
use crate::gateway::RemoteChatProvider;
use crate::graph_store::GraphStore;
use crate::kg::graph_retrieve;
use crate::table_store::{Query, TableStore};
use crate::tokenize::tokenize;
use crate::vector_index::{rank_order, Collection, Payload, ScoredChunk};

pub const RRF_K: f64 = 60.0;
pub const PARENT_WINDOW: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Vector,
    #[serde(alias = "keyword")]
    Fulltext,
    Graph,
    Table,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Vector, Source::Fulltext, Source::Graph, Source::Table];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Vector => "vector",
            Source::Fulltext => "fulltext",
            Source::Graph => "graph",
            Source::Table => "table",
        }
    }
}

impl std::str::FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "vector" => Ok(Source::Vector),
            "fulltext" | "keyword" => Ok(Source::Fulltext),
            "graph" => Ok(Source::Graph),
            "table" => Ok(Source::Table),
            other => Err(Error::invalid_request("sources", format!("unknown source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    AlphaBlend,
    Rrf,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "alpha_blend" | "alpha" => Ok(Fusion::AlphaBlend),
            "rrf" => Ok(Fusion::Rrf),
            other => Err(Error::invalid_request("fusion", format!("unknown fusion `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankKind {
    #[default]
    None,
    LexicalOverlap,
    RemoteHttp,
}

impl std::str::FromStr for RerankKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(RerankKind::None),
            "lexical_overlap" | "lexical" => Ok(RerankKind::LexicalOverlap),
            "remote_http" | "remote" => Ok(RerankKind::RemoteHttp),
            other => Err(Error::invalid_request("rerank", format!("unknown reranker `{other}`"))),
        }
    }
}

fn default_k() -> usize {
    5
}

fn default_alpha() -> f64 {
    0.5
}

fn default_sources() -> Vec<Source> {
    Source::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalRequest {
    pub query: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_sources")]
    pub sources: Vec<Source>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default)]
    pub table_query: Option<Query>,
    #[serde(default)]
    pub filters: Payload,
    /// `None` means the configured default.
    #[serde(default)]
    pub rerank: Option<RerankKind>,
}

impl RetrievalRequest {
    pub fn new(query: impl Into<String>, k: usize) -> Self {
        RetrievalRequest {
            query: query.into(),
            k,
            sources: default_sources(),
            alpha: default_alpha(),
            fusion: Fusion::default(),
            table_query: None,
            filters: Payload::new(),
            rerank: None,
        }
    }

    pub fn sources(mut self, sources: &[Source]) -> Self {
        self.sources = sources.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid_request("k", "k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid_request("alpha", format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.sources.is_empty() {
            return Err(Error::invalid_request("sources", "at least one source is required"));
        }
        Ok(())
    }

    /// Requested sources, deduplicated, in canonical order.
    pub fn source_set(&self) -> Vec<Source> {
        self.sources.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub chunk_id: String,
    pub source: Source,
    pub raw_score: f64,
    pub norm_score: f64,
    pub rank: usize,
}

/// Rank a scored list (score desc, id asc) and attach min–max normalized
/// scores. If every score is equal, every hit normalizes to 1.0.
pub fn hit_list(source: Source, mut scored: Vec<ScoredChunk>) -> Vec<Hit> {
    scored.sort_by(rank_order);
    let max = scored.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
    let min = scored.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
    scored
        .into_iter()
        .enumerate()
        .map(|(i, s)| Hit {
            norm_score: if max > min { (s.score - min) / (max - min) } else { 1.0 },
            chunk_id: s.chunk_id,
            source,
            raw_score: s.score,
            rank: i + 1,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTrace {
    pub source: Source,
    pub hits: Vec<Hit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedEntry {
    pub chunk_id: String,
    pub fused_score: f64,
    pub contributions: BTreeMap<Source, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedResult {
    pub ranking: Vec<FusedEntry>,
    pub trace: Vec<SourceTrace>,
}

impl FusedResult {
    pub fn chunk_ids(&self) -> Vec<&str> {
        self.ranking.iter().map(|e| e.chunk_id.as_str()).collect()
    }
}

fn sort_fused(entries: &mut [FusedEntry]) {
    entries.sort_by(|a, b| {
        b.fused_score
            .partial_cmp(&a.fused_score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.chunk_id.cmp(&b.chunk_id))
    });
}

/// Fuse any number of per-source lists.
///
/// Alpha mode: `alpha * norm_vector + (1 - alpha) * mean(norm of each
/// nonempty non-vector list)`, absent chunks contributing 0. RRF mode sums
/// `1 / (60 + rank)` over every list.
pub fn fuse(lists: &[SourceTrace], alpha: f64, fusion: Fusion) -> Vec<FusedEntry> {
    let mut entries: BTreeMap<&str, BTreeMap<Source, f64>> = BTreeMap::new();
    let side_lists = lists
        .iter()
        .filter(|l| l.source != Source::Vector && !l.hits.is_empty())
        .count();
    for list in lists {
        for hit in &list.hits {
            let part = match fusion {
                Fusion::Rrf => 1.0 / (RRF_K + hit.rank as f64),
                Fusion::AlphaBlend if list.source == Source::Vector => alpha * hit.norm_score,
                Fusion::AlphaBlend => (1.0 - alpha) * hit.norm_score / side_lists as f64,
            };
            *entries
                .entry(&hit.chunk_id)
                .or_default()
                .entry(list.source)
                .or_default() += part;
        }
    }
    let mut out: Vec<FusedEntry> = entries
        .into_iter()
        .map(|(id, contributions)| FusedEntry {
            chunk_id: id.to_string(),
            // Vector part sums first; at alpha = 1 the rest are exact zeros.
            fused_score: contributions.values().sum(),
            contributions,
            rerank_score: None,
        })
        .collect();
    sort_fused(&mut out);
    out
}

/// Two-list form of [`fuse`].
pub fn fuse_hybrid(vector_hits: &[Hit], keyword_hits: &[Hit], alpha: f64, fusion: Fusion) -> FusedResult {
    let trace = vec![
        SourceTrace {
            source: Source::Vector,
            hits: vector_hits.to_vec(),
            error: None,
        },
        SourceTrace {
            source: Source::Fulltext,
            hits: keyword_hits.to_vec(),
            error: None,
        },
    ];
    FusedResult {
        ranking: fuse(&trace, alpha, fusion),
        trace,
    }
}

/// One store's search behind a common interface.
pub trait HitSource: Send + Sync {
    fn source(&self) -> Source;

    fn search(&self, req: &RetrievalRequest) -> Result<Vec<ScoredChunk>>;
}

pub struct VectorSource<'a> {
    pub collection: &'a Collection,
    pub embedder: &'a dyn Embedder,
}

impl HitSource for VectorSource<'_> {
    fn source(&self) -> Source {
        Source::Vector
    }

    fn search(&self, req: &RetrievalRequest) -> Result<Vec<ScoredChunk>> {
        let q = self.embedder.embed(&req.query)?;
        let filter = (!req.filters.is_empty()).then_some(&req.filters);
        self.collection.search_topk(&q, req.k, filter)
    }
}

pub struct KeywordSource<'a> {
    pub index: &'a InvertedIndex,
    pub params: Bm25Params,
}

impl HitSource for KeywordSource<'_> {
    fn source(&self) -> Source {
        Source::Fulltext
    }

    fn search(&self, req: &RetrievalRequest) -> Result<Vec<ScoredChunk>> {
        Ok(self.index.search_keyword(&self.params, &req.query, req.k))
    }
}

pub struct GraphSource<'a> {
    pub graph: &'a GraphStore,
    pub embedder: &'a dyn Embedder,
}

impl HitSource for GraphSource<'_> {
    fn source(&self) -> Source {
        Source::Graph
    }

    fn search(&self, req: &RetrievalRequest) -> Result<Vec<ScoredChunk>> {
        let evidence = graph_retrieve(self.graph, &req.query, req.k, self.embedder)?;
        Ok(evidence
            .provenance_chunks
            .into_iter()
            .map(|chunk_id| ScoredChunk {
                chunk_id,
                score: evidence.score,
            })
            .collect())
    }
}

pub struct TableSource<'a> {
    pub tables: &'a TableStore,
}

impl HitSource for TableSource<'_> {
    fn source(&self) -> Source {
        Source::Table
    }

    fn search(&self, req: &RetrievalRequest) -> Result<Vec<ScoredChunk>> {
        let Some(q) = &req.table_query else {
            return Ok(Vec::new());
        };
        Ok(self
            .tables
            .run_query(q)?
            .provenance()
            .into_iter()
            .map(|chunk_id| ScoredChunk { chunk_id, score: 1.0 })
            .collect())
    }
}

/// Query every requested source concurrently. Failures and missing stores
/// degrade to an empty list with the error recorded in the trace. Output
/// order follows [`Source`] order, independent of completion order.
pub fn fanout_search(
    backends: &[&dyn HitSource],
    req: &RetrievalRequest,
    admit: &(dyn Fn(&str) -> bool + Sync),
) -> Vec<SourceTrace> {
    let wanted = req.source_set();
    std::thread::scope(|s| {
        let handles: Vec<_> = wanted
            .iter()
            .map(|&source| {
                let backend = backends.iter().find(|b| b.source() == source).copied();
                s.spawn(move || match backend {
                    None => Err(format!("{} store not initialized", source.as_str())),
                    Some(b) => b.search(req).map_err(|e| e.to_string()),
                })
            })
            .collect();
        wanted
            .iter()
            .zip(handles)
            .map(|(&source, h)| {
                let outcome = h
                    .join()
                    .unwrap_or_else(|_| Err(format!("{} search panicked", source.as_str())));
                match outcome {
                    Ok(scored) => SourceTrace {
                        source,
                        hits: hit_list(source, scored.into_iter().filter(|c| admit(&c.chunk_id)).collect()),
                        error: None,
                    },
                    Err(error) => {
                        warn!(source = source.as_str(), %error, "source failed; continuing without it");
                        SourceTrace {
                            source,
                            hits: Vec::new(),
                            error: Some(error),
                        }
                    }
                }
            })
            .collect()
    })
}

/// Scores (query, document) pairs for reranking.
pub trait PairScorer: Send + Sync {
    fn score(&self, query: &str, documents: &[String]) -> Result<Vec<f64>>;
}

impl PairScorer for RemoteChatProvider {
    fn score(&self, query: &str, documents: &[String]) -> Result<Vec<f64>> {
        self.rerank(query, documents)
    }
}

/// Jaccard similarity of the query and text token sets.
pub fn jaccard(query: &str, text: &str) -> f64 {
    let a: HashSet<String> = tokenize(query).into_iter().collect();
    let b: HashSet<String> = tokenize(text).into_iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

pub enum Reranker<'a> {
    None,
    LexicalOverlap,
    Remote(&'a dyn PairScorer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RerankOutcome {
    pub applied: bool,
    pub fell_back: bool,
}

/// Reorder candidates by pair score, descending; equal scores keep their
/// incoming order. A remote failure leaves the input order untouched.
pub fn rerank(
    query: &str,
    candidates: &mut Vec<FusedEntry>,
    texts: &[String],
    reranker: &Reranker<'_>,
) -> RerankOutcome {
    let scores = match reranker {
        Reranker::None => return RerankOutcome::default(),
        Reranker::LexicalOverlap => texts.iter().map(|t| jaccard(query, t)).collect(),
        Reranker::Remote(scorer) => match scorer.score(query, texts) {
            Ok(s) if s.len() == candidates.len() => s,
            Ok(_) => {
                warn!("reranker returned the wrong number of scores; keeping fused order");
                return RerankOutcome {
                    applied: false,
                    fell_back: true,
                };
            }
            Err(e) => {
                warn!(error = %e, "reranker unavailable; keeping fused order");
                return RerankOutcome {
                    applied: false,
                    fell_back: true,
                };
            }
        },
    };
    let mut paired: Vec<(FusedEntry, f64)> = candidates.drain(..).zip(scores).collect();
    paired.sort_by(|a, b| b.1.total_cmp(&a.1));
    candidates.extend(paired.into_iter().map(|(mut e, s)| {
        e.rerank_score = Some(s);
        e
    }));
    RerankOutcome {
        applied: true,
        fell_back: false,
    }
}

/// Text of the chunk plus every same-document chunk whose token span
/// overlaps the chunk's span widened by `window` on each side, in document
/// order.
pub fn parent_context(corpus: &Corpus, chunk_id: &str, window: usize) -> Result<String> {
    let chunk = corpus
        .get(chunk_id)
        .ok_or_else(|| Error::UnknownChunk(chunk_id.to_string()))?;
    let lo = chunk.parent_span.0.saturating_sub(window);
    let hi = chunk.parent_span.1 + window;
    let mut parts: Vec<&Chunk> = corpus
        .document_chunks(&chunk.doc_id)
        .filter(|c| {
            c.chunk_id == chunk.chunk_id || (c.parent_span.0 < hi && c.parent_span.1 > lo && c.parent_span.0 < c.parent_span.1)
        })
        .collect();
    parts.sort_by(|a, b| a.parent_span.cmp(&b.parent_span).then_with(|| a.chunk_id.cmp(&b.chunk_id)));
    Ok(parts.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join("\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedHit {
    pub chunk_id: String,
    pub doc_id: String,
    pub score: f64,
    pub text: String,
    pub parent_context: String,
}

/// Attach parent context to each hit, preserving order.
pub fn expand_parents(entries: &[FusedEntry], corpus: &Corpus) -> Result<Vec<ExpandedHit>> {
    entries
        .iter()
        .map(|e| {
            let chunk = corpus
                .get(&e.chunk_id)
                .ok_or_else(|| Error::UnknownChunk(e.chunk_id.clone()))?;
            Ok(ExpandedHit {
                chunk_id: e.chunk_id.clone(),
                doc_id: chunk.doc_id.clone(),
                score: e.fused_score,
                text: chunk.text.clone(),
                parent_context: parent_context(corpus, &e.chunk_id, PARENT_WINDOW)?,
            })
        })
        .collect()
}

/// Payload stored with each vector record and matched by request filters.
pub fn chunk_payload(chunk: &Chunk) -> Payload {
    let mut p: Payload = chunk.metadata.clone();
    p.insert("doc_id".into(), chunk.doc_id.clone());
    p.insert("modality".into(), chunk.modality.as_str().into());
    p
}

pub fn payload_matches(payload: &Payload, filters: &Payload) -> bool {
    filters.iter().all(|(k, v)| payload.get(k) == Some(v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    #[serde(flatten)]
    pub result: FusedResult,
    pub hits: Vec<ExpandedHit>,
    pub rerank: RerankOutcome,
}

/// Fan out, fuse, keep the top k, rerank them and expand parents.
pub fn search(
    req: &RetrievalRequest,
    backends: &[&dyn HitSource],
    corpus: &Corpus,
    reranker: &Reranker<'_>,
) -> Result<SearchResponse> {
    req.validate()?;
    let admit = |id: &str| {
        corpus
            .get(id)
            .is_some_and(|c| payload_matches(&chunk_payload(c), &req.filters))
    };
    let trace = fanout_search(backends, req, &admit);
    let mut ranking = fuse(&trace, req.alpha, req.fusion);
    ranking.truncate(req.k);
    let texts: Vec<String> = ranking
        .iter()
        .map(|e| corpus.get(&e.chunk_id).map(|c| c.text.clone()).unwrap_or_default())
        .collect();
    let outcome = rerank(&req.query, &mut ranking, &texts, reranker);
    let hits = expand_parents(&ranking, corpus)?;
    Ok(SearchResponse {
        result: FusedResult { ranking, trace },
        hits,
        rerank: outcome,
    })
}

/// Anything that can answer a retrieval request end to end.
pub trait Searcher: Sync {
    /// Sources this searcher can actually serve.
    fn available_sources(&self) -> Vec<Source>;

    fn search(&self, req: &RetrievalRequest) -> Result<SearchResponse>;
}

/// The initialized stores plus the configured reranker.
pub struct SearchEngine<'a> {
    pub backends: Vec<&'a dyn HitSource>,
    pub corpus: &'a Corpus,
    pub reranker: Reranker<'a>,
    pub default_rerank: RerankKind,
}

impl Searcher for SearchEngine<'_> {
    fn available_sources(&self) -> Vec<Source> {
        self.backends
            .iter()
            .map(|b| b.source())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    fn search(&self, req: &RetrievalRequest) -> Result<SearchResponse> {
        let kind = req.rerank.unwrap_or(self.default_rerank);
        let reranker = match (kind, &self.reranker) {
            (RerankKind::None, _) => &Reranker::None,
            (RerankKind::LexicalOverlap, _) => &Reranker::LexicalOverlap,
            (RerankKind::RemoteHttp, r @ Reranker::Remote(_)) => r,
            (RerankKind::RemoteHttp, _) => {
                warn!("remote reranker requested but not configured; keeping fused order");
                &Reranker::None
            }
        };
        search(req, &self.backends, self.corpus, reranker)
    }
}
