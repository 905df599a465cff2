//! Multi-hop question answering: rewrite, retrieve, extract notes, judge,
//! and repeat with follow-up queries until the notes suffice or the step
//! budget runs out.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::gateway::{bindings, complete_prompt, ChatProvider, TemplateCatalog};
use crate::retrieval::{ExpandedHit, Fusion, RerankKind, RetrievalRequest, Searcher, Source};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_steps: usize,
    pub k: usize,
    pub fusion: Fusion,
    pub alpha: f64,
    /// Empty means every source the searcher serves.
    pub sources: Vec<Source>,
    pub rerank: Option<RerankKind>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            max_steps: 5,
            k: 8,
            fusion: Fusion::Rrf,
            alpha: 0.5,
            sources: Vec::new(),
            rerank: None,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::config("agent.max_steps", "max_steps must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::config("agent.k", "k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("agent.alpha", "alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub text: String,
    pub supporting_chunk_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Sufficient,
    Insufficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepHit {
    pub chunk_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub queries: Vec<String>,
    pub hits: Vec<StepHit>,
    pub notes: Vec<Note>,
    pub verdict: Verdict,
    pub followup_queries: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Sufficient,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub answer: String,
    pub citations: Vec<String>,
    pub terminated_by: Termination,
    pub trace: Vec<StepRecord>,
}

impl Answer {
    /// Chunk ids retrieved across all steps, first appearance order.
    pub fn retrieved_chunk_ids(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.trace
            .iter()
            .flat_map(|s| s.hits.iter())
            .filter(|h| seen.insert(h.chunk_id.as_str()))
            .map(|h| h.chunk_id.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub original_question: String,
    pub current_queries: Vec<String>,
    pub memory: Vec<Note>,
    pub step: usize,
    pub max_steps: usize,
}

pub(crate) fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[(\d+(?:\s*,\s*\d+)*)\]").expect("valid regex"))
}

/// 1-based numbers inside bracketed markers such as `[2]` or `[1, 3]`, in
/// order of appearance.
pub fn marker_numbers(text: &str) -> Vec<usize> {
    marker_re()
        .captures_iter(text)
        .flat_map(|c| {
            c[1].split(',')
                .filter_map(|n| n.trim().parse().ok())
                .collect::<Vec<usize>>()
        })
        .collect()
}

fn strip_markers(text: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\s*\[\d+(?:\s*,\s*\d+)*\]").expect("valid regex"));
    let stripped = re.replace_all(text, "");
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The JSON value between the first `open` and the last `close`.
fn json_span(reply: &str, open: char, close: char) -> Option<&str> {
    let start = reply.find(open)?;
    let end = reply.rfind(close)?;
    (end > start).then(|| &reply[start..=end])
}

fn numbered(lines: impl Iterator<Item = String>) -> String {
    let out: Vec<String> = lines.enumerate().map(|(i, l)| format!("[{}] {l}", i + 1)).collect();
    if out.is_empty() {
        "(none)".into()
    } else {
        out.join("\n")
    }
}

/// Rewrite the question once; a provider failure keeps the question.
pub fn rewrite_query(question: &str, provider: &dyn ChatProvider, catalog: &TemplateCatalog) -> String {
    let attempt = catalog
        .render("query_rewrite", &bindings([("question", question.to_string())]))
        .and_then(|p| complete_prompt(provider, p));
    match attempt {
        Ok(q) if !q.trim().is_empty() => q.trim().to_string(),
        Ok(_) => question.to_string(),
        Err(e) => {
            warn!(error = %e, "query rewrite failed; using the original question");
            question.to_string()
        }
    }
}

/// Extract notes from numbered passages. A note cites the passages named by
/// its markers, or every passage when it names none.
pub fn extract_key_info(
    hits: &[ExpandedHit],
    question: &str,
    provider: &dyn ChatProvider,
    catalog: &TemplateCatalog,
) -> Result<Vec<Note>> {
    if hits.is_empty() {
        return Ok(Vec::new());
    }
    let passages = numbered(hits.iter().map(|h| h.parent_context.replace('\n', " ")));
    let prompt = catalog.render(
        "extract_notes",
        &bindings([("question", question.to_string()), ("passages", passages)]),
    )?;
    let reply = complete_prompt(provider, prompt)?;
    let Some(items) = json_span(&reply, '[', ']').and_then(|j| serde_json::from_str::<Vec<String>>(j).ok()) else {
        warn!("note extraction reply is not a JSON list of strings; no notes this step");
        return Ok(Vec::new());
    };
    let all: Vec<String> = hits.iter().map(|h| h.chunk_id.clone()).collect();
    Ok(items
        .into_iter()
        .filter_map(|raw| {
            let text = strip_markers(&raw);
            if text.is_empty() {
                return None;
            }
            let mut seen = HashSet::new();
            let cited: Vec<String> = marker_numbers(&raw)
                .into_iter()
                .filter(|n| (1..=hits.len()).contains(n))
                .map(|n| hits[n - 1].chunk_id.clone())
                .filter(|id| seen.insert(id.clone()))
                .collect();
            Some(Note {
                text,
                supporting_chunk_ids: if cited.is_empty() { all.clone() } else { cited },
            })
        })
        .collect())
}

#[derive(Deserialize)]
struct JudgeReply {
    sufficient: bool,
    #[serde(default, alias = "followups")]
    followup_queries: Vec<String>,
}

/// Judge the memory against the question. Insufficient without follow-ups
/// is coerced to sufficient, as is an unparseable reply.
pub fn judge_sufficiency(
    state: &AgentState,
    provider: &dyn ChatProvider,
    catalog: &TemplateCatalog,
) -> Result<(Verdict, Vec<String>)> {
    let notes = numbered(state.memory.iter().map(|n| n.text.clone()));
    let prompt = catalog.render(
        "judge_sufficiency",
        &bindings([("question", state.original_question.clone()), ("notes", notes)]),
    )?;
    let reply = complete_prompt(provider, prompt)?;
    let Some(parsed) = json_span(&reply, '{', '}').and_then(|j| serde_json::from_str::<JudgeReply>(j).ok()) else {
        warn!("sufficiency reply unparseable; treating as sufficient");
        return Ok((Verdict::Sufficient, Vec::new()));
    };
    if parsed.sufficient {
        return Ok((Verdict::Sufficient, Vec::new()));
    }
    let followups: Vec<String> = parsed
        .followup_queries
        .into_iter()
        .map(|q| q.trim().to_string())
        .filter(|q| !q.is_empty())
        .collect();
    if followups.is_empty() {
        warn!("insufficient verdict without follow-up queries; treating as sufficient");
        return Ok((Verdict::Sufficient, Vec::new()));
    }
    Ok((Verdict::Insufficient, followups))
}

pub struct MultiHopAgent<'a> {
    pub searcher: &'a dyn Searcher,
    pub provider: &'a dyn ChatProvider,
    pub catalog: &'a TemplateCatalog,
    pub config: AgentConfig,
}

impl MultiHopAgent<'_> {
    fn request(&self, query: &str) -> RetrievalRequest {
        let sources = if self.config.sources.is_empty() {
            self.searcher.available_sources()
        } else {
            self.config.sources.clone()
        };
        RetrievalRequest {
            query: query.to_string(),
            k: self.config.k,
            sources,
            alpha: self.config.alpha,
            fusion: self.config.fusion,
            table_query: None,
            filters: Default::default(),
            rerank: self.config.rerank,
        }
    }

    /// Hits for every current query, first occurrence of each chunk kept.
    fn retrieve(&self, queries: &[String]) -> Vec<ExpandedHit> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for q in queries {
            match self.searcher.search(&self.request(q)) {
                Ok(resp) => out.extend(resp.hits.into_iter().filter(|h| seen.insert(h.chunk_id.clone()))),
                Err(e) => warn!(query = %q, error = %e, "retrieval failed for query"),
            }
        }
        out
    }

    pub fn run(&self, question: &str) -> Result<Answer> {
        self.config.validate()?;
        if question.trim().is_empty() {
            return Err(Error::invalid_request("question", "question must be nonempty"));
        }
        let mut state = AgentState {
            original_question: question.to_string(),
            current_queries: vec![rewrite_query(question, self.provider, self.catalog)],
            memory: Vec::new(),
            step: 0,
            max_steps: self.config.max_steps,
        };
        let mut trace = Vec::new();
        let mut terminated_by = Termination::Budget;
        let mut degraded = false;

        while state.step < state.max_steps {
            let hits = self.retrieve(&state.current_queries);
            let notes = match extract_key_info(&hits, question, self.provider, self.catalog) {
                Ok(n) => n,
                Err(e) => {
                    warn!(error = %e, "note extraction failed; answering with what is known");
                    degraded = true;
                    Vec::new()
                }
            };
            state.memory.extend(notes.iter().cloned());
            let (verdict, followups) = if degraded {
                (Verdict::Sufficient, Vec::new())
            } else {
                judge_sufficiency(&state, self.provider, self.catalog).unwrap_or_else(|e| {
                    warn!(error = %e, "sufficiency judge failed; answering with what is known");
                    degraded = true;
                    (Verdict::Sufficient, Vec::new())
                })
            };
            trace.push(StepRecord {
                step: state.step,
                queries: state.current_queries.clone(),
                hits: hits
                    .iter()
                    .map(|h| StepHit {
                        chunk_id: h.chunk_id.clone(),
                        score: h.score,
                    })
                    .collect(),
                notes,
                verdict,
                followup_queries: followups.clone(),
            });
            state.step += 1;
            if verdict == Verdict::Sufficient {
                if !degraded {
                    terminated_by = Termination::Sufficient;
                }
                break;
            }
            state.current_queries = followups;
        }

        let (text, citations) = self.final_answer(&state).unwrap_or_else(|e| {
            warn!(error = %e, "final answer generation failed; returning the notes");
            terminated_by = Termination::Budget;
            let text = state.memory.iter().map(|n| n.text.as_str()).collect::<Vec<_>>().join(" ");
            let mut seen = HashSet::new();
            let cites = state
                .memory
                .iter()
                .flat_map(|n| n.supporting_chunk_ids.iter().cloned())
                .filter(|id| seen.insert(id.clone()))
                .collect();
            (text, cites)
        });
        Ok(Answer {
            answer: text,
            citations,
            terminated_by,
            trace,
        })
    }

    fn final_answer(&self, state: &AgentState) -> Result<(String, Vec<String>)> {
        let notes = numbered(state.memory.iter().map(|n| n.text.clone()));
        let prompt = self.catalog.render(
            "final_answer",
            &bindings([("question", state.original_question.clone()), ("notes", notes)]),
        )?;
        let text = complete_prompt(self.provider, prompt)?.trim().to_string();
        let mut seen = HashSet::new();
        let citations = marker_numbers(&text)
            .into_iter()
            .filter(|n| (1..=state.memory.len()).contains(n))
            .flat_map(|n| state.memory[n - 1].supporting_chunk_ids.iter().cloned())
            .filter(|id| seen.insert(id.clone()))
            .collect();
        Ok((text, citations))
    }
}
