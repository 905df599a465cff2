//! Property graph of entities and relations with undirected k-hop traversal.
//!
//! Edges keep their direction for display; traversal ignores it. Summary
//! nodes (layer ≥ 1) hang off their members through `summarizes` edges and
//! are never part of the relation view used by [`GraphStore::khop_neighbors`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, Embedder, EmbeddingVector};
use crate::error::{Error, Result};

pub const SUMMARIZES: &str = "summarizes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityNode {
    pub entity_id: String,
    pub display_name: String,
    pub entity_type: String,
    pub description: String,
    pub layer: u32,
    #[serde(default)]
    pub community_id: Option<String>,
    #[serde(default)]
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationEdge {
    pub src: String,
    pub dst: String,
    pub predicate: String,
    pub weight: f64,
    pub provenance: Vec<String>,
}

impl RelationEdge {
    pub fn is_summary(&self) -> bool {
        self.predicate == SUMMARIZES
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub source_chunk: String,
}

impl Triple {
    pub fn new(subject: &str, predicate: &str, object: &str, source_chunk: &str) -> Self {
        Triple {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
            source_chunk: source_chunk.into(),
        }
    }

    pub fn is_valid(&self) -> bool {
        [&self.subject, &self.predicate, &self.object, &self.source_chunk]
            .iter()
            .all(|s| !s.trim().is_empty())
    }
}

/// Lowercase with runs of whitespace collapsed to one space.
pub fn normalize_entity(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMatch {
    pub entity_id: String,
    pub score: f64,
    pub exact: bool,
}

type EdgeKey = (String, String, String);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphStore {
    nodes: BTreeMap<String, EntityNode>,
    edges: BTreeMap<EdgeKey, RelationEdge>,
    /// Undirected adjacency over relation edges only.
    adjacency: BTreeMap<String, BTreeSet<String>>,
}

impl GraphStore {
    pub fn new() -> Self {
        GraphStore::default()
    }

    pub fn node(&self, entity_id: &str) -> Option<&EntityNode> {
        self.nodes.get(entity_id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &EntityNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &RelationEdge> {
        self.edges.values()
    }

    pub fn edge(&self, src: &str, dst: &str, predicate: &str) -> Option<&RelationEdge> {
        self.edges
            .get(&(src.to_string(), dst.to_string(), predicate.to_string()))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Relation-edge neighbors, ignoring direction.
    pub fn neighbors(&self, entity_id: &str) -> impl Iterator<Item = &String> {
        self.adjacency.get(entity_id).into_iter().flatten()
    }

    /// Members of a summary node.
    pub fn summarized_by(&self, summary_id: &str) -> Vec<&str> {
        let lo = (summary_id.to_string(), String::new(), String::new());
        self.edges
            .range(lo..)
            .take_while(|((s, _, _), _)| s == summary_id)
            .filter(|(_, e)| e.is_summary())
            .map(|(_, e)| e.dst.as_str())
            .collect()
    }

    /// Summary nodes that directly summarize `entity_id`.
    pub fn summaries_of(&self, entity_id: &str) -> Vec<&str> {
        self.edges
            .values()
            .filter(|e| e.is_summary() && e.dst == entity_id)
            .map(|e| e.src.as_str())
            .collect()
    }

    fn ensure_entity(&mut self, name: &str) -> bool {
        let id = normalize_entity(name);
        if self.nodes.contains_key(&id) {
            return false;
        }
        self.nodes.insert(
            id.clone(),
            EntityNode {
                entity_id: id,
                display_name: name.split_whitespace().collect::<Vec<_>>().join(" "),
                entity_type: "entity".into(),
                description: name.split_whitespace().collect::<Vec<_>>().join(" "),
                layer: 0,
                community_id: None,
                embedding: None,
            },
        );
        true
    }

    /// Insert triples; returns (nodes created, edges created). Repeated
    /// (src, dst, predicate) edges gain weight 1 and merge provenance.
    pub fn import_triples(&mut self, triples: &[Triple]) -> (usize, usize) {
        let mut new_nodes = 0;
        let mut new_edges = 0;
        for t in triples.iter().filter(|t| t.is_valid()) {
            new_nodes += self.ensure_entity(&t.subject) as usize;
            new_nodes += self.ensure_entity(&t.object) as usize;
            let src = normalize_entity(&t.subject);
            let dst = normalize_entity(&t.object);
            let predicate = normalize_entity(&t.predicate);
            let key = (src.clone(), dst.clone(), predicate.clone());
            match self.edges.get_mut(&key) {
                Some(edge) => {
                    edge.weight += 1.0;
                    if !edge.provenance.contains(&t.source_chunk) {
                        edge.provenance.push(t.source_chunk.clone());
                    }
                }
                None => {
                    self.edges.insert(
                        key,
                        RelationEdge {
                            src: src.clone(),
                            dst: dst.clone(),
                            predicate,
                            weight: 1.0,
                            provenance: vec![t.source_chunk.clone()],
                        },
                    );
                    self.adjacency.entry(src.clone()).or_default().insert(dst.clone());
                    self.adjacency.entry(dst).or_default().insert(src);
                    new_edges += 1;
                }
            }
        }
        (new_nodes, new_edges)
    }

    /// Add or replace a node directly (summary nodes, tests).
    pub fn upsert_node(&mut self, node: EntityNode) {
        self.nodes.insert(node.entity_id.clone(), node);
    }

    /// Add an edge between existing nodes. `summarizes` edges stay out of the
    /// traversal view.
    pub fn add_edge(&mut self, edge: RelationEdge) -> Result<()> {
        for end in [&edge.src, &edge.dst] {
            if !self.nodes.contains_key(end) {
                return Err(Error::UnknownEntity(end.clone()));
            }
        }
        if !edge.is_summary() {
            self.adjacency.entry(edge.src.clone()).or_default().insert(edge.dst.clone());
            self.adjacency.entry(edge.dst.clone()).or_default().insert(edge.src.clone());
        }
        self.edges
            .insert((edge.src.clone(), edge.dst.clone(), edge.predicate.clone()), edge);
        Ok(())
    }

    /// Remove a summary node and its `summarizes` edges.
    pub(crate) fn remove_summary_node(&mut self, id: &str) {
        if self.nodes.get(id).is_some_and(|n| n.layer > 0) {
            self.nodes.remove(id);
            self.edges
                .retain(|(s, d, p), _| !(p == SUMMARIZES && (s == id || d == id)));
        }
    }

    /// Breadth-first closure within `k` undirected hops, seed included.
    pub fn khop_neighbors(&self, seed: &str, k: usize) -> Result<BTreeSet<String>> {
        if !self.nodes.contains_key(seed) {
            return Err(Error::UnknownEntity(seed.to_string()));
        }
        let mut seen = BTreeSet::from([seed.to_string()]);
        let mut queue = VecDeque::from([(seed.to_string(), 0usize)]);
        while let Some((node, depth)) = queue.pop_front() {
            if depth == k {
                continue;
            }
            for next in self.neighbors(&node) {
                if seen.insert(next.clone()) {
                    queue.push_back((next.clone(), depth + 1));
                }
            }
        }
        Ok(seen)
    }

    /// Rank layer-0 entities for a query: exact normalized-name matches first
    /// (score 1.0), then positive cosine between the query embedding and the
    /// entity description embedding. Ties go to the smaller entity id.
    pub fn match_entities(
        &self,
        query: &str,
        limit: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<EntityMatch>> {
        if limit == 0 {
            return Err(Error::invalid_request("limit", "limit must be at least 1"));
        }
        let wanted = normalize_entity(query);
        let q = embedder.embed(query)?;
        let mut out = Vec::new();
        for node in self.nodes.values().filter(|n| n.layer == 0) {
            if node.entity_id == wanted {
                out.push(EntityMatch {
                    entity_id: node.entity_id.clone(),
                    score: 1.0,
                    exact: true,
                });
                continue;
            }
            let emb = match &node.embedding {
                Some(e) if e.dim() == q.dim() => e.clone(),
                _ => embedder.embed(&node.description)?,
            };
            let score = cosine_similarity(&q, &emb)?;
            if score > 0.0 {
                out.push(EntityMatch {
                    entity_id: node.entity_id.clone(),
                    score,
                    exact: false,
                });
            }
        }
        out.sort_by(|a, b| {
            b.exact
                .cmp(&a.exact)
                .then(b.score.total_cmp(&a.score))
                .then_with(|| a.entity_id.cmp(&b.entity_id))
        });
        out.truncate(limit);
        Ok(out)
    }

    /// Writes `nodes.jsonl` and `edges.jsonl` into `dir`.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut nodes = fs::File::create(dir.join("nodes.jsonl"))?;
        for n in self.nodes.values() {
            serde_json::to_writer(&mut nodes, n)?;
            nodes.write_all(b"\n")?;
        }
        let mut edges = fs::File::create(dir.join("edges.jsonl"))?;
        for e in self.edges.values() {
            serde_json::to_writer(&mut edges, e)?;
            edges.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn restore(dir: &Path) -> Result<Self> {
        fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
            let file = fs::File::open(path)
                .map_err(|e| Error::CorruptSnapshot(format!("{}: {e}", path.display())))?;
            let mut out = Vec::new();
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                out.push(serde_json::from_str(&line).map_err(|e| {
                    Error::CorruptSnapshot(format!("{} line {}: {e}", path.display(), n + 1))
                })?);
            }
            Ok(out)
        }
        let nodes: Vec<EntityNode> = read_lines(&dir.join("nodes.jsonl"))?;
        let edges: Vec<RelationEdge> = read_lines(&dir.join("edges.jsonl"))?;
        let mut g = GraphStore::new();
        for n in nodes {
            g.upsert_node(n);
        }
        for e in edges {
            g.add_edge(e)
                .map_err(|e| Error::CorruptSnapshot(format!("dangling edge: {e}")))?;
        }
        Ok(g)
    }
}

/// Read a JSON Lines triple file.
pub fn read_triples(path: &Path) -> Result<Vec<Triple>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::MalformedInput(format!("triple line {}: {e}", n + 1)))
        })
        .collect()
}

pub fn write_triples<W: Write>(triples: &[Triple], mut out: W) -> Result<()> {
    for t in triples {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
