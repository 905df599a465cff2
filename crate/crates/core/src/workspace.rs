//! On-disk workspace: corpus, the four stores and config under one directory.
//!
//! ```text
//! <ws>/config.toml
//! <ws>/corpus.jsonl
//! <ws>/vector/chunks/
//! <ws>/fulltext.json
//! <ws>/tables/
//! <ws>/graph/
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::agent::{Answer, MultiHopAgent};
use crate::config::{load_config, WorkspaceConfig};
use crate::corpus::{build_corpus, load_document_dir, Corpus};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::fulltext::InvertedIndex;
use crate::gateway::{ChatProvider, ProviderKind, RemoteChatProvider, TemplateCatalog, UnavailableProvider};
use crate::graph_store::GraphStore;
use crate::kg::{aggregate_hierarchy, extract_triples_llm, extract_triples_pattern, ExtractorKind, HierarchyReport};
use crate::retrieval::{
    chunk_payload, GraphSource, HitSource, KeywordSource, Reranker, RetrievalRequest, SearchEngine,
    SearchResponse, Searcher, TableSource, VectorSource,
};
use crate::table_store::TableStore;
use crate::vector_index::{Collection, VectorRecord};
use crate::writer::{DeepWriter, Report};

pub const VECTOR_COLLECTION: &str = "chunks";
pub const CONFIG_FILE: &str = "config.toml";
pub const CORPUS_FILE: &str = "corpus.jsonl";
const FULLTEXT_FILE: &str = "fulltext.json";
const STORE_ENTRIES: [&str; 4] = ["vector", FULLTEXT_FILE, "tables", "graph"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct StoreCounts {
    pub chunks: usize,
    pub vector: usize,
    pub fulltext: usize,
    pub tables: usize,
    pub table_rows: usize,
    pub graph_nodes: usize,
    pub graph_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexReport {
    pub counts: StoreCounts,
    pub snapshot_hash: String,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub counts: StoreCounts,
}

/// The four stores built from one corpus.
#[derive(Debug)]
pub struct Stores {
    pub vectors: Collection,
    pub fulltext: InvertedIndex,
    pub tables: TableStore,
    pub graph: GraphStore,
}

impl Stores {
    pub fn build(
        corpus: &Corpus,
        cfg: &WorkspaceConfig,
        embedder: &dyn Embedder,
        provider: Option<&dyn ChatProvider>,
        catalog: &TemplateCatalog,
    ) -> Result<Self> {
        let chunks = corpus.chunks();
        let mut vectors = Collection::new(VECTOR_COLLECTION, embedder.dim());
        let embedded = embedder.embed_batch(&chunks.iter().map(|c| c.text.clone()).collect::<Vec<_>>())?;
        let records = chunks
            .iter()
            .zip(embedded)
            .map(|(c, vector)| VectorRecord {
                chunk_id: c.chunk_id.clone(),
                vector,
                payload: chunk_payload(c),
            })
            .collect();
        vectors.insert(records)?;

        let fulltext = InvertedIndex::build(chunks, cfg.fulltext.tokenizer())?;

        let mut tables = TableStore::new();
        for c in chunks {
            tables.import_table_chunk(c)?;
        }

        let mut graph = GraphStore::new();
        if cfg.kg.enabled {
            build_graph(&mut graph, corpus, cfg, provider, catalog)?;
        }
        Ok(Stores {
            vectors,
            fulltext,
            tables,
            graph,
        })
    }

    pub fn counts(&self, corpus: &Corpus) -> StoreCounts {
        StoreCounts {
            chunks: corpus.len(),
            vector: self.vectors.len(),
            fulltext: self.fulltext.n,
            tables: self.tables.table_count(),
            table_rows: self.tables.row_count(),
            graph_nodes: self.graph.node_count(),
            graph_edges: self.graph.edge_count(),
        }
    }

    fn snapshot(&self, dir: &Path) -> Result<()> {
        self.vectors.snapshot(&dir.join("vector").join(VECTOR_COLLECTION))?;
        self.fulltext.snapshot(&dir.join(FULLTEXT_FILE))?;
        self.tables.snapshot(&dir.join("tables"))?;
        self.graph.snapshot(&dir.join("graph"))
    }

    pub fn restore(dir: &Path) -> Result<Self> {
        Ok(Stores {
            vectors: Collection::restore(&dir.join("vector").join(VECTOR_COLLECTION))?,
            fulltext: InvertedIndex::restore(&dir.join(FULLTEXT_FILE))?,
            tables: TableStore::restore(&dir.join("tables"))?,
            graph: GraphStore::restore(&dir.join("graph"))?,
        })
    }

    /// Every chunk id referenced by a store must exist in the corpus.
    pub fn check_integrity(&self, corpus: &Corpus) -> Result<()> {
        let vector_ids = self.vectors.records().iter().map(|r| r.chunk_id.as_str());
        let fulltext_ids = self.fulltext.doc_lengths.keys().map(String::as_str);
        let graph_ids = self
            .graph
            .edges()
            .flat_map(|e| e.provenance.iter().map(String::as_str));
        let table_ids = self
            .tables
            .tables()
            .flat_map(|t| t.rows.iter().filter_map(|r| r.provenance.as_deref()));
        for id in vector_ids.chain(fulltext_ids).chain(graph_ids).chain(table_ids) {
            if !corpus.contains(id) {
                return Err(Error::UnknownChunk(id.to_string()));
            }
        }
        Ok(())
    }
}

/// Triples from the configured extractor, then the summary hierarchy.
pub fn build_graph(
    graph: &mut GraphStore,
    corpus: &Corpus,
    cfg: &WorkspaceConfig,
    provider: Option<&dyn ChatProvider>,
    catalog: &TemplateCatalog,
) -> Result<HierarchyReport> {
    let spec = cfg.kg.extractor_spec();
    let triples = match spec.kind {
        ExtractorKind::Pattern => extract_triples_pattern(corpus.chunks()),
        ExtractorKind::Llm => {
            let provider = provider
                .ok_or_else(|| Error::config("gateway", "llm triple extraction needs a gateway"))?;
            extract_triples_llm(corpus.chunks(), provider, catalog, &spec, cfg.kg.workers)?
        }
    };
    graph.import_triples(&triples);
    if graph.is_empty() {
        return Ok(HierarchyReport::default());
    }
    aggregate_hierarchy(graph, &cfg.kg.hierarchy(), provider, catalog)
}

/// SHA-256 over the corpus and store files, visited in sorted path order.
pub fn snapshot_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    for entry in std::iter::once(CORPUS_FILE).chain(STORE_ENTRIES) {
        collect_files(&root.join(entry), &mut files)?;
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        let bytes = fs::read(&f)?;
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
    } else if path.is_dir() {
        for entry in fs::read_dir(path)? {
            collect_files(&entry?.path(), out)?;
        }
    }
    Ok(())
}

fn copy_tree(src: &Path, dst: &Path) -> Result<()> {
    if src.is_dir() {
        fs::create_dir_all(dst)?;
        for entry in fs::read_dir(src)? {
            let entry = entry?;
            copy_tree(&entry.path(), &dst.join(entry.file_name()))?;
        }
    } else if src.is_file() {
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(src, dst)?;
    }
    Ok(())
}

fn remove_entry(path: &Path) -> Result<()> {
    if path.is_dir() {
        fs::remove_dir_all(path)?;
    } else if path.exists() {
        fs::remove_file(path)?;
    }
    Ok(())
}

/// Chunk every document in `input` into `<ws>/corpus.jsonl`.
pub fn ingest(root: &Path, input: &Path, cfg: &WorkspaceConfig) -> Result<usize> {
    fs::create_dir_all(root)?;
    let docs = load_document_dir(input)?;
    let n = build_corpus(&docs, cfg.chunk, &root.join(CORPUS_FILE))?;
    info!(documents = docs.len(), chunks = n, "corpus written");
    Ok(n)
}

/// Language-model handles derived from config.
pub struct Models {
    pub embedder: Box<dyn Embedder>,
    pub provider: Option<Box<dyn ChatProvider>>,
    /// Pairwise scorer for remote reranking, when the gateway is remote.
    pub scorer: Option<RemoteChatProvider>,
    pub catalog: TemplateCatalog,
}

impl Models {
    pub fn from_config(cfg: &WorkspaceConfig) -> Result<Self> {
        let catalog = match &cfg.templates_dir {
            Some(dir) => TemplateCatalog::with_overrides(dir)?,
            None => TemplateCatalog::default(),
        };
        let provider = cfg.gateway.as_ref().map(|g| g.build()).transpose()?;
        let scorer = match &cfg.gateway {
            Some(g) if g.kind == ProviderKind::RemoteChat => Some(RemoteChatProvider::from_spec(g)?),
            _ => None,
        };
        Ok(Models {
            embedder: cfg.embedder.build()?,
            provider,
            scorer,
            catalog,
        })
    }

    pub fn provider(&self) -> Option<&dyn ChatProvider> {
        self.provider.as_deref()
    }
}

/// Build all stores from `<ws>/corpus.jsonl` and swap them in. Nothing on
/// disk changes unless every store builds and writes; a failed swap puts the
/// previous snapshot back.
pub fn index_all(root: &Path, cfg: &WorkspaceConfig, models: &Models) -> Result<IndexReport> {
    let started = Instant::now();
    let corpus = Corpus::load(&root.join(CORPUS_FILE))?;
    let stores = Stores::build(&corpus, cfg, models.embedder.as_ref(), models.provider(), &models.catalog)?;
    stores.check_integrity(&corpus)?;

    let staging = root.join(".staging");
    let backup = root.join(".backup");
    remove_entry(&staging)?;
    remove_entry(&backup)?;
    if let Err(e) = stores.snapshot(&staging) {
        let _ = remove_entry(&staging);
        return Err(e);
    }
    swap_in(root, &staging, &backup)?;
    remove_entry(&staging)?;
    remove_entry(&backup)?;

    let counts = stores.counts(&corpus);
    let report = IndexReport {
        counts,
        snapshot_hash: snapshot_hash(root)?,
        duration_ms: started.elapsed().as_millis() as u64,
    };
    info!(hash = %report.snapshot_hash, ?report.counts, "index complete");
    Ok(report)
}

fn swap_in(root: &Path, staging: &Path, backup: &Path) -> Result<()> {
    fs::create_dir_all(backup)?;
    let mut moved = Vec::new();
    let result = (|| -> Result<()> {
        for entry in STORE_ENTRIES {
            let live = root.join(entry);
            if live.exists() {
                fs::rename(&live, backup.join(entry))?;
            }
            moved.push(entry);
            let staged = staging.join(entry);
            if staged.exists() {
                fs::rename(&staged, &live)?;
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        warn!(error = %e, "swap failed; restoring previous snapshot");
        for entry in moved {
            let _ = remove_entry(&root.join(entry));
            let saved = backup.join(entry);
            if saved.exists() {
                let _ = fs::rename(&saved, root.join(entry));
            }
        }
        return Err(e);
    }
    Ok(())
}

/// Copy the corpus, stores and config to `dest`.
pub fn export_snapshot(root: &Path, dest: &Path) -> Result<String> {
    if dest.exists() && fs::read_dir(dest)?.next().is_some() {
        return Err(Error::AlreadyExists(dest.display().to_string()));
    }
    for entry in [CORPUS_FILE, CONFIG_FILE].into_iter().chain(STORE_ENTRIES) {
        copy_tree(&root.join(entry), &dest.join(entry))?;
    }
    snapshot_hash(dest)
}

/// An indexed workspace opened for queries.
pub struct Workspace {
    pub root: PathBuf,
    pub config: WorkspaceConfig,
    pub corpus: Corpus,
    pub stores: Stores,
    pub models: Models,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Self> {
        let config = load_config(&root.join(CONFIG_FILE))?;
        Self::open_with(root, config)
    }

    pub fn open_with(root: &Path, config: WorkspaceConfig) -> Result<Self> {
        let models = Models::from_config(&config)?;
        let corpus = Corpus::load(&root.join(CORPUS_FILE))?;
        let stores = Stores::restore(root)?;
        Ok(Workspace {
            root: root.to_path_buf(),
            config,
            corpus,
            stores,
            models,
        })
    }

    /// Assemble a workspace from stores already built in memory. Nothing is
    /// read from or written to `root`.
    pub fn from_parts(root: &Path, config: WorkspaceConfig, corpus: Corpus, stores: Stores) -> Result<Self> {
        stores.check_integrity(&corpus)?;
        Ok(Workspace {
            root: root.to_path_buf(),
            models: Models::from_config(&config)?,
            config,
            corpus,
            stores,
        })
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            counts: self.stores.counts(&self.corpus),
        }
    }

    /// Fill fields the request leaves out from `[fusion]` defaults, then
    /// parse. The error key names the offending field.
    pub fn request_from_json(&self, mut body: Json) -> Result<RetrievalRequest> {
        let obj = body
            .as_object_mut()
            .ok_or_else(|| Error::invalid_request("body", "expected a JSON object"))?;
        let d = &self.config.fusion;
        let defaults = [
            ("k", serde_json::to_value(d.k)?),
            ("alpha", serde_json::to_value(d.alpha)?),
            ("fusion", serde_json::to_value(d.fusion)?),
        ];
        for (key, value) in defaults {
            obj.entry(key).or_insert(value);
        }
        if !d.sources.is_empty() {
            obj.entry("sources").or_insert(serde_json::to_value(&d.sources)?);
        }
        let req: RetrievalRequest = serde_path_to_error::deserialize(body).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "body".to_string() } else { path };
            Error::invalid_request(key, e.inner().to_string())
        })?;
        req.validate()?;
        Ok(req)
    }

    /// Run `f` with a search engine over all four stores.
    pub fn with_engine<R>(&self, f: impl FnOnce(&SearchEngine<'_>) -> R) -> R {
        let embedder = self.models.embedder.as_ref();
        let vector = VectorSource {
            collection: &self.stores.vectors,
            embedder,
        };
        let keyword = KeywordSource {
            index: &self.stores.fulltext,
            params: self.config.fulltext.params(),
        };
        let graph = GraphSource {
            graph: &self.stores.graph,
            embedder,
        };
        let table = TableSource {
            tables: &self.stores.tables,
        };
        let reranker = match &self.models.scorer {
            Some(s) => Reranker::Remote(s),
            None => Reranker::None,
        };
        let engine = SearchEngine {
            backends: vec![&vector as &dyn HitSource, &keyword, &graph, &table],
            corpus: &self.corpus,
            reranker,
            default_rerank: self.config.fusion.rerank,
        };
        f(&engine)
    }

    pub fn search(&self, req: &RetrievalRequest) -> Result<SearchResponse> {
        self.with_engine(|engine| engine.search(req))
    }

    pub fn ask(&self, question: &str) -> Result<Answer> {
        let unavailable = UnavailableProvider;
        let provider = self.models.provider().unwrap_or(&unavailable);
        self.with_engine(|engine| {
            MultiHopAgent {
                searcher: engine,
                provider,
                catalog: &self.models.catalog,
                config: self.config.agent_config(),
            }
            .run(question)
        })
    }

    pub fn report(&self, query: &str) -> Result<Report> {
        let unavailable = UnavailableProvider;
        let provider = self.models.provider().unwrap_or(&unavailable);
        DeepWriter {
            collection: &self.stores.vectors,
            embedder: self.models.embedder.as_ref(),
            corpus: &self.corpus,
            provider,
            catalog: &self.models.catalog,
            model_fact_check: self.models.provider.is_some(),
            config: self.config.writer.clone(),
        }
        .write(query)
    }

    /// Rebuild only the graph and write it back.
    pub fn rebuild_graph(&mut self) -> Result<HierarchyReport> {
        let mut graph = GraphStore::new();
        let report = build_graph(&mut graph, &self.corpus, &self.config, self.models.provider(), &self.models.catalog)?;
        let staging = self.root.join(".staging-graph");
        remove_entry(&staging)?;
        graph.snapshot(&staging)?;
        remove_entry(&self.root.join("graph"))?;
        fs::rename(&staging, self.root.join("graph"))?;
        self.stores.graph = graph;
        Ok(report)
    }
}
