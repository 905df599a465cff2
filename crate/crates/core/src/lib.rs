//! Hybrid retrieval over multimodal document corpora: chunking, vector,
//! full-text, table and graph indexes, fused search, a multi-hop answering
//! agent and a long-form report writer.

pub mod agent;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod fulltext;
pub mod gateway;
pub mod graph_store;
pub mod kg;
pub mod retrieval;
pub mod table_store;
pub mod tokenize;
pub mod vector_index;
pub mod workspace;
pub mod writer;

pub use corpus::{Block, Chunk, ChunkPolicy, Corpus, Modality, ParsedDocument};
pub use embedding::{Embedder, EmbedderSpec, EmbeddingVector, HashEmbedder};
pub use error::{Error, Result};
pub use fulltext::{Bm25Params, InvertedIndex};
pub use gateway::{ChatMessage, ChatProvider, ProviderSpec, ScriptedProvider, TemplateCatalog};
pub use table_store::{Query, QueryResult, TableSchema, TableStore, Value};
pub use vector_index::{Collection, ScoredChunk, VectorStore};
pub use agent::{AgentConfig, Answer, MultiHopAgent, Termination};
pub use config::{load_config, WorkspaceConfig};
pub use evaluation::{score_challenge, ChallengeScore, QARecord, RubricScore};
pub use graph_store::{GraphStore, Triple};
pub use kg::{ExtractorSpec, HierarchyConfig};
pub use retrieval::{Fusion, RerankKind, RetrievalRequest, SearchResponse, Source};
pub use workspace::{index_all, Health, IndexReport, StoreCounts, Workspace};
pub use writer::{DeepWriter, Report, WriterConfig};
