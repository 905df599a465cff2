//! Knowledge-graph construction: triple extraction, community summary
//! layers and bottom-up graph retrieval.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::corpus::Chunk;
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::gateway::{bindings, ChatMessage, ChatProvider, CompletionParams, TemplateCatalog};
use crate::graph_store::{EntityMatch, EntityNode, GraphStore, RelationEdge, Triple, SUMMARIZES};
use crate::tokenize::tokenize_with_spans;

pub const TRIPLE_TEMPLATE: &str = "triple_extract";
pub const SUMMARY_TEMPLATE: &str = "community_summary";

/// Largest token gap between two capitalized runs that still yields a triple.
const MAX_GAP: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    #[default]
    Pattern,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    #[serde(default)]
    pub prompt_template_id: Option<String>,
}

impl ExtractorSpec {
    pub fn pattern() -> Self {
        ExtractorSpec::default()
    }

    pub fn llm() -> Self {
        ExtractorSpec {
            kind: ExtractorKind::Llm,
            prompt_template_id: Some(TRIPLE_TEMPLATE.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ExtractorKind::Llm && self.prompt_template_id.is_none() {
            return Err(Error::config(
                "kg.prompt_template_id",
                "llm extraction needs a prompt template id",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyConfig {
    pub levels: usize,
    pub min_community_size: usize,
    pub lp_max_iters: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            levels: 2,
            min_community_size: 2,
            lp_max_iters: 10,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::config("kg.levels", "levels must be at least 1"));
        }
        if self.min_community_size < 2 {
            return Err(Error::config("kg.min_community_size", "must be at least 2"));
        }
        if self.lp_max_iters < 1 {
            return Err(Error::config("kg.lp_max_iters", "must be at least 1"));
        }
        Ok(())
    }
}

fn is_capitalized(word: &str) -> bool {
    word.chars().next().is_some_and(char::is_uppercase)
}

/// Capitalized-run heuristic, one sentence at a time.
pub fn extract_triples_pattern(chunks: &[Chunk]) -> Vec<Triple> {
    let mut out = Vec::new();
    for chunk in chunks {
        for sentence in chunk.text.split(['.', '!', '?']) {
            let words: Vec<&str> = tokenize_with_spans(sentence)
                .into_iter()
                .map(|t| &sentence[t.span])
                .collect();
            // Maximal runs of capitalized tokens as [start, end).
            let mut runs = Vec::new();
            let mut i = 0;
            while i < words.len() {
                if is_capitalized(words[i]) {
                    let start = i;
                    while i < words.len() && is_capitalized(words[i]) {
                        i += 1;
                    }
                    runs.push((start, i));
                } else {
                    i += 1;
                }
            }
            for (a, &(s1, e1)) in runs.iter().enumerate() {
                for &(s2, e2) in &runs[a + 1..] {
                    let gap = s2 - e1;
                    if gap > MAX_GAP {
                        break;
                    }
                    let predicate = words[e1..s2]
                        .iter()
                        .map(|w| w.to_lowercase())
                        .collect::<Vec<_>>()
                        .join(" ");
                    out.push(Triple {
                        subject: words[s1..e1].join(" "),
                        predicate,
                        object: words[s2..e2].join(" "),
                        source_chunk: chunk.chunk_id.clone(),
                    });
                }
            }
        }
    }
    out
}

#[derive(Deserialize)]
struct RawTriple {
    subject: String,
    predicate: String,
    object: String,
}

/// Parse a model reply as a JSON list of triples. Tolerates surrounding prose
/// or code fences by reading from the first `[` to the last `]`.
pub fn parse_triple_response(reply: &str, source_chunk: &str) -> Option<Vec<Triple>> {
    let start = reply.find('[')?;
    let end = reply.rfind(']')?;
    if end < start {
        return None;
    }
    let raw: Vec<RawTriple> = serde_json::from_str(&reply[start..=end]).ok()?;
    Some(
        raw.into_iter()
            .map(|r| Triple::new(r.subject.trim(), r.predicate.trim(), r.object.trim(), source_chunk))
            .filter(Triple::is_valid)
            .collect(),
    )
}

pub const TRIPLE_RETRY_MESSAGE: &str =
    "That reply was not a valid JSON list. Reply with only a JSON list of objects with the keys \"subject\", \"predicate\" and \"object\".";

fn extract_one(
    chunk: &Chunk,
    provider: &dyn ChatProvider,
    catalog: &TemplateCatalog,
    template_id: &str,
) -> Result<Vec<Triple>> {
    let prompt = catalog.render(template_id, &bindings([("text", chunk.text.clone())]))?;
    let params = CompletionParams::default();
    let mut messages = vec![ChatMessage::user(prompt)];
    let first = provider.complete(&messages, &params)?.text;
    if let Some(t) = parse_triple_response(&first, &chunk.chunk_id) {
        return Ok(t);
    }
    debug!(chunk_id = %chunk.chunk_id, "unparseable triple reply; retrying once");
    messages.push(ChatMessage::assistant(first));
    messages.push(ChatMessage::user(TRIPLE_RETRY_MESSAGE));
    let second = provider.complete(&messages, &params)?.text;
    match parse_triple_response(&second, &chunk.chunk_id) {
        Some(t) => Ok(t),
        None => {
            warn!(chunk_id = %chunk.chunk_id, "triple reply unparseable after retry; chunk skipped");
            Ok(Vec::new())
        }
    }
}

/// Model-driven extraction, up to `workers` chunks in flight; output keeps
/// chunk order.
pub fn extract_triples_llm(
    chunks: &[Chunk],
    provider: &dyn ChatProvider,
    catalog: &TemplateCatalog,
    spec: &ExtractorSpec,
    workers: usize,
) -> Result<Vec<Triple>> {
    spec.validate()?;
    let template_id = spec.prompt_template_id.as_deref().unwrap_or(TRIPLE_TEMPLATE);
    catalog.get(template_id)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Vec<Triple>>>>> =
        Mutex::new((0..chunks.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, chunks.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= chunks.len() {
                    break;
                }
                let r = extract_one(&chunks[i], provider, catalog, template_id);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    let mut out = Vec::new();
    for r in results.into_inner().expect("result lock") {
        out.extend(r.expect("every chunk processed")?);
    }
    Ok(out)
}

/// Run whichever extractor `spec` names.
pub fn extract_triples(
    chunks: &[Chunk],
    spec: &ExtractorSpec,
    provider: &dyn ChatProvider,
    catalog: &TemplateCatalog,
) -> Result<Vec<Triple>> {
    match spec.kind {
        ExtractorKind::Pattern => Ok(extract_triples_pattern(chunks)),
        ExtractorKind::Llm => extract_triples_llm(chunks, provider, catalog, spec, 4),
    }
}

/// Asynchronous label propagation. Nodes are visited in ascending id order and
/// adopt the most frequent label among their neighbors, smallest label on
/// ties. Nodes without neighbors keep their own label.
pub fn label_propagation(
    adjacency: &BTreeMap<String, BTreeSet<String>>,
    max_iters: usize,
) -> BTreeMap<String, String> {
    let mut labels: BTreeMap<String, String> =
        adjacency.keys().map(|k| (k.clone(), k.clone())).collect();
    for _ in 0..max_iters {
        let mut changed = false;
        for (node, neighbors) in adjacency {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for n in neighbors {
                if let Some(l) = labels.get(n) {
                    *counts.entry(l.as_str()).or_default() += 1;
                }
            }
            // Highest count wins; on equal counts the smaller label compares greater.
            let Some(best) = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(l, _)| l.to_string())
            else {
                continue;
            };
            if labels[node] != best {
                labels.insert(node.clone(), best);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Group a labeling into communities, each sorted, ordered by smallest member.
pub fn communities(labels: &BTreeMap<String, String>) -> Vec<Vec<String>> {
    let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (node, label) in labels {
        groups.entry(label).or_default().push(node.clone());
    }
    let mut out: Vec<Vec<String>> = groups.into_values().collect();
    out.sort_by(|a, b| a[0].cmp(&b[0]));
    out
}

pub fn summary_id(level: usize, index: usize) -> String {
    format!("community:{level}:{index}")
}

fn summarize(
    graph: &GraphStore,
    members: &[String],
    provider: Option<&dyn ChatProvider>,
    catalog: &TemplateCatalog,
) -> Result<String> {
    let names: Vec<&str> = members
        .iter()
        .filter_map(|m| graph.node(m))
        .map(|n| n.display_name.as_str())
        .collect();
    let Some(provider) = provider else {
        return Ok(names.join(", "));
    };
    let member_set: BTreeSet<&str> = members.iter().map(String::as_str).collect();
    let member_lines: Vec<String> = members
        .iter()
        .filter_map(|m| graph.node(m))
        .map(|n| {
            if n.description != n.display_name {
                format!("- {}: {}", n.display_name, n.description)
            } else {
                format!("- {}", n.display_name)
            }
        })
        .collect();
    let relation_lines: Vec<String> = graph
        .edges()
        .filter(|e| !e.is_summary() && member_set.contains(e.src.as_str()) && member_set.contains(e.dst.as_str()))
        .map(|e| format!("- {} {} {}", e.src, e.predicate, e.dst))
        .collect();
    let prompt = catalog.render(
        SUMMARY_TEMPLATE,
        &bindings([
            ("members", member_lines.join("\n")),
            (
                "relations",
                if relation_lines.is_empty() {
                    "- none".to_string()
                } else {
                    relation_lines.join("\n")
                },
            ),
        ]),
    )?;
    let reply = provider.complete(&[ChatMessage::user(prompt)], &CompletionParams::default())?;
    Ok(reply.text.trim().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub created: usize,
    pub kept: usize,
    pub removed: usize,
}

/// Build summary layers 1..=levels. Layer-0 nodes and relation edges are left
/// untouched. Existing summary nodes that already match the computed
/// community are kept as-is, so a rerun with the same config is a no-op.
pub fn aggregate_hierarchy(
    graph: &mut GraphStore,
    config: &HierarchyConfig,
    provider: Option<&dyn ChatProvider>,
    catalog: &TemplateCatalog,
) -> Result<HierarchyReport> {
    config.validate()?;
    let mut report = HierarchyReport::default();
    let mut adjacency: BTreeMap<String, BTreeSet<String>> = graph
        .nodes()
        .filter(|n| n.layer == 0)
        .map(|n| (n.entity_id.clone(), graph.neighbors(&n.entity_id).cloned().collect()))
        .collect();
    if adjacency.is_empty() {
        return Err(Error::MalformedInput("graph has no layer-0 nodes".into()));
    }

    let mut wanted: BTreeSet<String> = BTreeSet::new();
    for level in 1..=config.levels {
        let labels = label_propagation(&adjacency, config.lp_max_iters);
        let groups: Vec<Vec<String>> = communities(&labels)
            .into_iter()
            .filter(|c| c.len() >= config.min_community_size)
            .collect();
        if groups.is_empty() {
            break;
        }
        let mut owner: BTreeMap<&str, String> = BTreeMap::new();
        for (i, members) in groups.iter().enumerate() {
            let id = summary_id(level, i);
            for m in members {
                owner.insert(m.as_str(), id.clone());
            }
            wanted.insert(id.clone());
            let existing: BTreeSet<&str> = graph.summarized_by(&id).into_iter().collect();
            let same = graph.node(&id).is_some_and(|n| n.layer as usize == level)
                && existing == members.iter().map(String::as_str).collect::<BTreeSet<_>>();
            if same {
                report.kept += 1;
                continue;
            }
            if graph.node(&id).is_some() {
                graph.remove_summary_node(&id);
                report.removed += 1;
            }
            let description = summarize(graph, members, provider, catalog)?;
            graph.upsert_node(EntityNode {
                entity_id: id.clone(),
                display_name: format!("Community {level}.{i}"),
                entity_type: "community".into(),
                description,
                layer: level as u32,
                community_id: Some(id.clone()),
                embedding: None,
            });
            for m in members {
                graph.add_edge(RelationEdge {
                    src: id.clone(),
                    dst: m.clone(),
                    predicate: SUMMARIZES.into(),
                    weight: 1.0,
                    provenance: Vec::new(),
                })?;
            }
            report.created += 1;
        }
        // Adjacency between this level's summaries, induced by member edges.
        let mut next: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (i, members) in groups.iter().enumerate() {
            let id = summary_id(level, i);
            let entry = next.entry(id.clone()).or_default();
            for m in members {
                for n in adjacency.get(m).into_iter().flatten() {
                    if let Some(other) = owner.get(n.as_str()) {
                        if *other != id {
                            entry.insert(other.clone());
                        }
                    }
                }
            }
        }
        adjacency = next;
    }

    let stale: Vec<String> = graph
        .nodes()
        .filter(|n| n.layer > 0 && !wanted.contains(&n.entity_id))
        .map(|n| n.entity_id.clone())
        .collect();
    for id in stale {
        graph.remove_summary_node(&id);
        report.removed += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GraphEvidence {
    pub matched_entities: Vec<EntityMatch>,
    pub nodes: Vec<String>,
    pub edges: Vec<RelationEdge>,
    pub summary_nodes: Vec<String>,
    pub provenance_chunks: Vec<String>,
    pub score: f64,
}

impl GraphEvidence {
    pub fn is_empty(&self) -> bool {
        self.matched_entities.is_empty()
    }

    /// Plain-text rendering used as retrieval evidence.
    pub fn render(&self, graph: &GraphStore) -> String {
        let mut lines: Vec<String> = self
            .edges
            .iter()
            .map(|e| {
                let name = |id: &str| graph.node(id).map_or(id.to_string(), |n| n.display_name.clone());
                format!("{} {} {}.", name(&e.src), e.predicate, name(&e.dst))
            })
            .collect();
        for s in &self.summary_nodes {
            if let Some(n) = graph.node(s) {
                lines.push(format!("{}: {}", n.display_name, n.description));
            }
        }
        lines.join("\n")
    }
}

/// Bottom-up retrieval: match entities, expand one hop, climb `summarizes`
/// edges, and collect edge provenance.
pub fn graph_retrieve(
    graph: &GraphStore,
    query: &str,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<GraphEvidence> {
    if graph.is_empty() {
        return Ok(GraphEvidence::default());
    }
    let matched = graph.match_entities(query, k.max(1), embedder)?;
    if matched.is_empty() {
        return Ok(GraphEvidence::default());
    }
    let mut nodes = BTreeSet::new();
    for m in &matched {
        nodes.extend(graph.khop_neighbors(&m.entity_id, 1)?);
    }
    let edges: Vec<RelationEdge> = graph
        .edges()
        .filter(|e| !e.is_summary() && nodes.contains(&e.src) && nodes.contains(&e.dst))
        .cloned()
        .collect();
    let mut summaries = BTreeSet::new();
    let mut frontier: Vec<String> = nodes.iter().cloned().collect();
    while let Some(n) = frontier.pop() {
        for s in graph.summaries_of(&n) {
            if summaries.insert(s.to_string()) {
                frontier.push(s.to_string());
            }
        }
    }
    let provenance: BTreeSet<String> = edges.iter().flat_map(|e| e.provenance.iter().cloned()).collect();
    let score = matched.iter().map(|m| m.score).fold(0.0, f64::max);
    Ok(GraphEvidence {
        matched_entities: matched,
        nodes: nodes.into_iter().collect(),
        edges,
        summary_nodes: summaries.into_iter().collect(),
        provenance_chunks: provenance.into_iter().collect(),
        score,
    })
}
