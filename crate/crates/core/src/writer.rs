//! Long-form Markdown reports: outline planning, per-section retrieval and
//! drafting, visual placement, global citation numbering and claim checks.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::agent::{marker_numbers, marker_re};
use crate::corpus::{Corpus, Modality};
use crate::embedding::{cosine_similarity, Embedder};
use crate::error::{Error, Result};
use crate::gateway::{bindings, complete_prompt, ChatProvider, TemplateCatalog};
use crate::retrieval::{expand_parents, ExpandedHit, FusedEntry};
use crate::tokenize::{is_stopword, tokenize};
use crate::vector_index::Collection;

pub const MIN_SECTIONS: usize = 3;
pub const MAX_SECTIONS: usize = 8;
pub const PLACEMENT_THRESHOLD: f64 = 0.15;
pub const SUPPORT_THRESHOLD: f64 = 0.3;
pub const STUB_BODY: &str = "No evidence found.";
pub const UNVERIFIED: &str = "⚠unverified";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WriterConfig {
    pub sections_max: usize,
    pub k: usize,
    pub placement_threshold: f64,
}

impl Default for WriterConfig {
    fn default() -> Self {
        WriterConfig {
            sections_max: MAX_SECTIONS,
            k: 6,
            placement_threshold: PLACEMENT_THRESHOLD,
        }
    }
}

impl WriterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_SECTIONS..=MAX_SECTIONS).contains(&self.sections_max) {
            return Err(Error::config(
                "writer.sections_max",
                format!("sections_max must lie in {MIN_SECTIONS}..={MAX_SECTIONS}"),
            ));
        }
        if self.k == 0 {
            return Err(Error::config("writer.k", "k must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSection {
    pub heading: String,
    #[serde(default)]
    pub section_query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportPlan {
    pub title: String,
    pub sections: Vec<PlanSection>,
}

impl ReportPlan {
    fn fallback(query: &str) -> Self {
        ReportPlan {
            title: query.to_string(),
            sections: vec![PlanSection {
                heading: query.to_string(),
                section_query: query.to_string(),
            }],
        }
    }
}

/// Plan sections from the model's outline. Unparseable replies fall back to a
/// single section named after the query; parsed plans are clipped to
/// `sections_max` and padded to three with `Conclusion` sections.
pub fn plan_outline(
    query: &str,
    sections_max: usize,
    provider: &dyn ChatProvider,
    catalog: &TemplateCatalog,
) -> Result<ReportPlan> {
    let sections_max = sections_max.clamp(MIN_SECTIONS, MAX_SECTIONS);
    let prompt = catalog.render(
        "outline_plan",
        &bindings([
            ("query", query.to_string()),
            ("min_sections", MIN_SECTIONS.to_string()),
            ("max_sections", sections_max.to_string()),
        ]),
    )?;
    let reply = complete_prompt(provider, prompt)?;
    let parsed = reply
        .find('{')
        .zip(reply.rfind('}'))
        .filter(|(s, e)| e > s)
        .and_then(|(s, e)| serde_json::from_str::<ReportPlan>(&reply[s..=e]).ok());
    let Some(raw) = parsed else {
        warn!("outline reply unparseable; using a single-section plan");
        return Ok(ReportPlan::fallback(query));
    };
    let mut seen = HashSet::new();
    let mut sections: Vec<PlanSection> = raw
        .sections
        .into_iter()
        .filter_map(|s| {
            let heading = s.heading.trim().to_string();
            if heading.is_empty() || !seen.insert(heading.clone()) {
                return None;
            }
            let section_query = match s.section_query.trim() {
                "" => heading.clone(),
                q => q.to_string(),
            };
            Some(PlanSection { heading, section_query })
        })
        .collect();
    if sections.is_empty() {
        warn!("outline has no usable sections; using a single-section plan");
        return Ok(ReportPlan::fallback(query));
    }
    sections.truncate(sections_max);
    let mut n = 1;
    while sections.len() < MIN_SECTIONS {
        let heading = if n == 1 {
            "Conclusion".to_string()
        } else {
            format!("Conclusion (cont. {n})")
        };
        n += 1;
        if seen.insert(heading.clone()) {
            sections.push(PlanSection {
                heading,
                section_query: query.to_string(),
            });
        }
    }
    let title = match raw.title.trim() {
        "" => query.to_string(),
        t => t.to_string(),
    };
    Ok(ReportPlan { title, sections })
}

/// Vector-only top-k context for a section query, parent-expanded.
pub fn doc_finder(
    section_query: &str,
    k: usize,
    collection: &Collection,
    embedder: &dyn Embedder,
    corpus: &Corpus,
) -> Result<Vec<ExpandedHit>> {
    if collection.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    let q = embedder.embed(section_query)?;
    let entries: Vec<FusedEntry> = collection
        .search_topk(&q, k, None)?
        .into_iter()
        .map(|s| FusedEntry {
            chunk_id: s.chunk_id,
            fused_score: s.score,
            contributions: BTreeMap::new(),
            rerank_score: None,
        })
        .collect();
    expand_parents(&entries, corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualAsset {
    pub chunk_id: String,
    pub modality: Modality,
    pub caption: String,
    #[serde(default)]
    pub media_path: Option<String>,
    #[serde(default)]
    pub table_text: Option<String>,
}

impl VisualAsset {
    /// Image and table chunks become assets; other modalities do not.
    pub fn from_chunk(chunk: &crate::corpus::Chunk) -> Option<Self> {
        match chunk.modality {
            Modality::Image => Some(VisualAsset {
                chunk_id: chunk.chunk_id.clone(),
                modality: Modality::Image,
                caption: chunk.text.clone(),
                media_path: chunk.media_path.clone(),
                table_text: None,
            }),
            Modality::Table => Some(VisualAsset {
                chunk_id: chunk.chunk_id.clone(),
                modality: Modality::Table,
                caption: chunk.text.clone(),
                media_path: None,
                table_text: Some(chunk.text.clone()),
            }),
            _ => None,
        }
    }

    /// One-line caption with square brackets removed so it never reads as
    /// a citation marker.
    fn label(&self) -> String {
        let first = self.caption.lines().next().unwrap_or("").trim().replace(['[', ']'], "");
        match self.modality {
            Modality::Table => format!("Table ({})", self.chunk_id),
            _ if first.is_empty() => format!("Figure ({})", self.chunk_id),
            _ => first,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionDraft {
    pub heading: String,
    /// Markers index into `used_chunk_ids`, starting at 1.
    pub body_markdown: String,
    pub used_chunk_ids: Vec<String>,
    #[serde(default)]
    pub visuals: Vec<VisualAsset>,
}

impl SectionDraft {
    pub fn stub(heading: &str) -> Self {
        SectionDraft {
            heading: heading.to_string(),
            body_markdown: STUB_BODY.to_string(),
            used_chunk_ids: Vec::new(),
            visuals: Vec::new(),
        }
    }
}

/// Keep in-range markers of `body` (1-based over `context`) and renumber
/// them over the cited subset in order of first citation.
pub fn localize_markers(body: &str, context: &[String]) -> (String, Vec<String>) {
    let mut used: Vec<String> = Vec::new();
    let mut local: HashMap<usize, usize> = HashMap::new();
    let rewritten = marker_re().replace_all(body, |caps: &regex::Captures<'_>| {
        let mut out = String::new();
        for n in caps[1].split(',').filter_map(|n| n.trim().parse::<usize>().ok()) {
            if !(1..=context.len()).contains(&n) {
                warn!(marker = n, passages = context.len(), "citation marker out of range; stripped");
                continue;
            }
            let idx = *local.entry(n).or_insert_with(|| {
                used.push(context[n - 1].clone());
                used.len()
            });
            out.push_str(&format!("[{idx}]"));
        }
        out
    });
    // Stripping can leave doubled spaces or a space before punctuation.
    let tidy = rewritten
        .lines()
        .map(|l| {
            let mut l = l.split(' ').filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" ");
            for p in [".", ",", ";", ":", "!", "?"] {
                l = l.replace(&format!(" {p}"), p);
            }
            l
        })
        .collect::<Vec<_>>()
        .join("\n");
    (tidy, used)
}

pub fn draft_section(
    section: &PlanSection,
    query: &str,
    context: &[ExpandedHit],
    provider: &dyn ChatProvider,
    catalog: &TemplateCatalog,
) -> Result<SectionDraft> {
    if context.is_empty() {
        return Ok(SectionDraft::stub(&section.heading));
    }
    let numbered: Vec<String> = context
        .iter()
        .enumerate()
        .map(|(i, h)| format!("[{}] {}", i + 1, h.parent_context.replace('\n', " ")))
        .collect();
    let prompt = catalog.render(
        "section_draft",
        &bindings([
            ("heading", section.heading.clone()),
            ("query", query.to_string()),
            ("section_query", section.section_query.clone()),
            ("context", numbered.join("\n")),
        ]),
    )?;
    let body = complete_prompt(provider, prompt)?;
    let ids: Vec<String> = context.iter().map(|h| h.chunk_id.clone()).collect();
    let (body_markdown, used_chunk_ids) = localize_markers(body.trim(), &ids);
    Ok(SectionDraft {
        heading: section.heading.clone(),
        body_markdown,
        used_chunk_ids,
        visuals: Vec::new(),
    })
}

/// Attach each asset to the section whose body is most similar to its
/// caption, if that similarity reaches `threshold`. Returns the assets left
/// unplaced.
pub fn place_visuals(
    drafts: &mut [SectionDraft],
    assets: &[VisualAsset],
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<Vec<VisualAsset>> {
    let bodies = drafts
        .iter()
        .map(|d| embedder.embed(&marker_re().replace_all(&d.body_markdown, "")))
        .collect::<Result<Vec<_>>>()?;
    let mut placed = HashSet::new();
    let mut unplaced = Vec::new();
    for asset in assets {
        if !placed.insert(asset.chunk_id.clone()) {
            continue;
        }
        let caption = embedder.embed(&asset.caption)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, body) in bodies.iter().enumerate() {
            let s = cosine_similarity(&caption, body)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        match best {
            Some((i, s)) if s >= threshold => drafts[i].visuals.push(asset.clone()),
            _ => unplaced.push(asset.clone()),
        }
    }
    Ok(unplaced)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BibEntry {
    pub doc_id: String,
    pub chunk_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClaimVerdict {
    Supported,
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimCheck {
    pub claim: String,
    pub verdict: ClaimVerdict,
    pub evidence_chunk_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub markdown: String,
    pub bibliography: BTreeMap<usize, BibEntry>,
    pub factcheck: Vec<ClaimCheck>,
}

const REFERENCES: &str = "## References";
const UNPLACED: &str = "## Unplaced assets";

/// Render the report with markers renumbered globally in order of first
/// citation.
pub fn assemble_report(
    plan: &ReportPlan,
    drafts: &[SectionDraft],
    unplaced: &[VisualAsset],
    corpus: &Corpus,
) -> Result<Report> {
    let mut global: HashMap<String, usize> = HashMap::new();
    let mut bibliography = BTreeMap::new();
    let mut cite = |chunk_id: &str| -> Result<usize> {
        if let Some(n) = global.get(chunk_id) {
            return Ok(*n);
        }
        let chunk = corpus
            .get(chunk_id)
            .ok_or_else(|| Error::UnknownChunk(chunk_id.to_string()))?;
        let n = global.len() + 1;
        global.insert(chunk_id.to_string(), n);
        bibliography.insert(
            n,
            BibEntry {
                doc_id: chunk.doc_id.clone(),
                chunk_id: chunk_id.to_string(),
            },
        );
        Ok(n)
    };

    let mut md = format!("# {}\n", plan.title);
    for draft in drafts {
        md.push_str(&format!("\n## {}\n\n", draft.heading));
        let mut failure = None;
        let body = marker_re().replace_all(&draft.body_markdown, |caps: &regex::Captures<'_>| {
            caps[1]
                .split(',')
                .filter_map(|n| n.trim().parse::<usize>().ok())
                .filter_map(|n| draft.used_chunk_ids.get(n.wrapping_sub(1)))
                .filter_map(|id| match cite(id) {
                    Ok(g) => Some(format!("[{g}]")),
                    Err(e) => {
                        failure.get_or_insert(e);
                        None
                    }
                })
                .collect::<String>()
        });
        if let Some(e) = failure {
            return Err(e);
        }
        md.push_str(body.trim_end());
        md.push('\n');
        for asset in &draft.visuals {
            let n = cite(&asset.chunk_id)?;
            md.push('\n');
            match (&asset.modality, &asset.table_text, &asset.media_path) {
                (Modality::Table, Some(table), _) => {
                    let table = table.trim();
                    if table.lines().all(|l| l.trim_start().starts_with('|')) {
                        md.push_str(table);
                    } else {
                        md.push_str(&format!("```\n{table}\n```"));
                    }
                    md.push('\n');
                    md.push_str(&format!("\n*Table: {}* [{n}]\n", asset.label()));
                }
                (_, _, path) => {
                    let label = asset.label();
                    md.push_str(&format!("![{label}]({})\n", path.as_deref().unwrap_or("")));
                    md.push_str(&format!("\n*Figure: {label}* [{n}]\n"));
                }
            }
        }
    }
    if !unplaced.is_empty() {
        md.push_str(&format!("\n{UNPLACED}\n\n"));
        for a in unplaced {
            md.push_str(&format!("- {} (`{}`)\n", a.label(), a.chunk_id));
        }
    }
    md.push_str(&format!("\n{REFERENCES}\n\n"));
    for (n, e) in &bibliography {
        md.push_str(&format!("[{n}] {}, {}\n", e.doc_id, e.chunk_id));
    }
    Ok(Report {
        markdown: md,
        bibliography,
        factcheck: Vec::new(),
    })
}

/// Byte ranges of sentences in `line`: a sentence ends at `.`, `!` or `?`
/// followed by whitespace or the end of the line.
fn sentence_spans(line: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    let mut chars = line.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let at_end = matches!(c, '.' | '!' | '?')
            && chars.peek().is_none_or(|(_, next)| next.is_whitespace());
        if at_end {
            spans.push((start, i + c.len_utf8()));
            start = i + c.len_utf8();
        }
    }
    if start < line.len() {
        spans.push((start, line.len()));
    }
    spans
        .into_iter()
        .filter_map(|(s, e)| {
            let text = &line[s..e];
            let lead = text.len() - text.trim_start().len();
            (!text.trim().is_empty()).then_some((s + lead, e))
        })
        .collect()
}

fn content_tokens(text: &str) -> HashSet<String> {
    tokenize(text).into_iter().filter(|t| !is_stopword(t)).collect()
}

/// Share of the claim's content tokens found in the evidence is at least 30%.
pub fn heuristic_supported(claim: &str, evidence: &str) -> bool {
    let claim = content_tokens(claim);
    if claim.is_empty() {
        return false;
    }
    let evidence: HashSet<String> = tokenize(evidence).into_iter().collect();
    let hits = claim.iter().filter(|t| evidence.contains(*t)).count();
    hits as f64 / claim.len() as f64 >= SUPPORT_THRESHOLD
}

fn model_supported(claim: &str, evidence: &str, provider: &dyn ChatProvider, catalog: &TemplateCatalog) -> Option<bool> {
    #[derive(Deserialize)]
    struct Reply {
        supported: bool,
    }
    let prompt = catalog
        .render(
            "fact_check",
            &bindings([("claim", claim.to_string()), ("evidence", evidence.to_string())]),
        )
        .ok()?;
    let reply = match complete_prompt(provider, prompt) {
        Ok(r) => r,
        Err(e) => {
            warn!(error = %e, "fact check unavailable; using token overlap");
            return None;
        }
    };
    let parsed = reply
        .find('{')
        .zip(reply.rfind('}'))
        .filter(|(s, e)| e > s)
        .and_then(|(s, e)| serde_json::from_str::<Reply>(&reply[s..=e]).ok());
    if parsed.is_none() {
        warn!("fact check reply unparseable; using token overlap");
    }
    parsed.map(|r| r.supported)
}

fn is_prose(line: &str) -> bool {
    let t = line.trim_start();
    !(t.is_empty()
        || t.starts_with('#')
        || t.starts_with("![")
        || t.starts_with('|')
        || t.starts_with("*Figure:")
        || t.starts_with("*Table:"))
}

/// Check every prose sentence that carries a citation marker against the
/// chunks it cites, and tag unsupported ones inline.
pub fn fact_check(
    report: &mut Report,
    corpus: &Corpus,
    provider: Option<&dyn ChatProvider>,
    catalog: &TemplateCatalog,
) -> Result<()> {
    let mut checks = Vec::new();
    let mut out_lines = Vec::new();
    let mut in_tail = false;
    let mut in_fence = false;
    for line in report.markdown.split('\n') {
        if line == REFERENCES || line == UNPLACED {
            in_tail = true;
        }
        let fence = line.trim_start().starts_with("```");
        if fence {
            in_fence = !in_fence;
        }
        if in_tail || fence || in_fence || !is_prose(line) {
            out_lines.push(line.to_string());
            continue;
        }
        let mut annotated = line.to_string();
        let mut line_checks = Vec::new();
        // Right to left so earlier byte offsets stay valid while annotating.
        for (s, e) in sentence_spans(line).into_iter().rev() {
            let sentence = &line[s..e];
            let markers = marker_numbers(sentence);
            if markers.is_empty() {
                continue;
            }
            let claim = {
                let stripped = marker_re().replace_all(sentence, "");
                stripped.split_whitespace().collect::<Vec<_>>().join(" ")
            };
            let mut cited = Vec::new();
            for n in markers {
                let entry = report
                    .bibliography
                    .get(&n)
                    .ok_or_else(|| Error::MalformedInput(format!("marker [{n}] missing from bibliography")))?;
                if !cited.contains(&entry.chunk_id) {
                    cited.push(entry.chunk_id.clone());
                }
            }
            let mut verdict = ClaimVerdict::Unsupported;
            let mut evidence_id = cited[0].clone();
            for id in &cited {
                let text = &corpus.get(id).ok_or_else(|| Error::UnknownChunk(id.clone()))?.text;
                let ok = provider
                    .and_then(|p| model_supported(&claim, text, p, catalog))
                    .unwrap_or_else(|| heuristic_supported(&claim, text));
                if ok {
                    verdict = ClaimVerdict::Supported;
                    evidence_id = id.clone();
                    break;
                }
            }
            if verdict == ClaimVerdict::Unsupported {
                annotated.insert_str(e, &format!(" {UNVERIFIED}"));
            }
            line_checks.push(ClaimCheck {
                claim,
                verdict,
                evidence_chunk_id: evidence_id,
            });
        }
        checks.extend(line_checks.into_iter().rev());
        out_lines.push(annotated);
    }
    report.markdown = out_lines.join("\n");
    report.factcheck = checks;
    Ok(())
}

pub struct DeepWriter<'a> {
    pub collection: &'a Collection,
    pub embedder: &'a dyn Embedder,
    pub corpus: &'a Corpus,
    pub provider: &'a dyn ChatProvider,
    pub catalog: &'a TemplateCatalog,
    /// When false, claims are checked by token overlap only.
    pub model_fact_check: bool,
    pub config: WriterConfig,
}

impl DeepWriter<'_> {
    pub fn write(&self, query: &str) -> Result<Report> {
        self.config.validate()?;
        if query.trim().is_empty() {
            return Err(Error::invalid_request("query", "query must be nonempty"));
        }
        let plan = plan_outline(query, self.config.sections_max, self.provider, self.catalog)?;
        let contexts = plan
            .sections
            .iter()
            .map(|s| doc_finder(&s.section_query, self.config.k, self.collection, self.embedder, self.corpus))
            .collect::<Result<Vec<_>>>()?;

        let drafts: Vec<Result<SectionDraft>> = std::thread::scope(|s| {
            let handles: Vec<_> = plan
                .sections
                .iter()
                .zip(&contexts)
                .map(|(section, ctx)| s.spawn(move || draft_section(section, query, ctx, self.provider, self.catalog)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::ProviderUnavailable("drafting panicked".into()))))
                .collect()
        });
        let mut drafts = drafts.into_iter().collect::<Result<Vec<_>>>()?;

        let mut seen = HashSet::new();
        let assets: Vec<VisualAsset> = contexts
            .iter()
            .flatten()
            .filter(|h| seen.insert(h.chunk_id.clone()))
            .filter_map(|h| self.corpus.get(&h.chunk_id))
            .filter_map(VisualAsset::from_chunk)
            .collect();
        let unplaced = place_visuals(&mut drafts, &assets, self.embedder, self.config.placement_threshold)?;
        let mut report = assemble_report(&plan, &drafts, &unplaced, self.corpus)?;
        let provider = self.model_fact_check.then_some(self.provider);
        fact_check(&mut report, self.corpus, provider, self.catalog)?;
        Ok(report)
    }
}

/// Markers cited anywhere in the Markdown.
pub fn cited_markers(markdown: &str) -> std::collections::BTreeSet<usize> {
    marker_numbers(markdown).into_iter().collect()
}
