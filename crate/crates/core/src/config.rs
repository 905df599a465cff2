//! Workspace configuration: a TOML file, environment overrides, defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::corpus::ChunkPolicy;
use crate::embedding::EmbedderSpec;
use crate::error::{Error, Result};
use crate::fulltext::Bm25Params;
use crate::gateway::{ProviderSpec, ENV_API_KEY, ENV_ENDPOINT};
use crate::kg::{ExtractorKind, ExtractorSpec, HierarchyConfig};
use crate::retrieval::{Fusion, RerankKind, Source};
use crate::tokenize::TokenizerOptions;
use crate::writer::WriterConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FulltextConfig {
    pub k1: f64,
    pub b: f64,
    pub stopwords: bool,
    pub stem: bool,
}

impl Default for FulltextConfig {
    fn default() -> Self {
        let p = Bm25Params::default();
        FulltextConfig {
            k1: p.k1,
            b: p.b,
            stopwords: false,
            stem: false,
        }
    }
}

impl FulltextConfig {
    pub fn params(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }

    pub fn tokenizer(&self) -> TokenizerOptions {
        TokenizerOptions {
            stopwords: self.stopwords,
            stem: self.stem,
        }
    }
}

/// Defaults applied to search requests that leave a field out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionDefaults {
    pub alpha: f64,
    pub fusion: Fusion,
    pub k: usize,
    /// Empty means all sources.
    pub sources: Vec<Source>,
    pub rerank: RerankKind,
}

impl Default for FusionDefaults {
    fn default() -> Self {
        FusionDefaults {
            alpha: 0.5,
            fusion: Fusion::Rrf,
            k: 8,
            sources: Vec::new(),
            rerank: RerankKind::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgConfig {
    pub enabled: bool,
    pub extractor: ExtractorKind,
    pub prompt_template_id: Option<String>,
    pub levels: usize,
    pub min_community_size: usize,
    pub lp_max_iters: usize,
    pub workers: usize,
}

impl Default for KgConfig {
    fn default() -> Self {
        let h = HierarchyConfig::default();
        KgConfig {
            enabled: true,
            extractor: ExtractorKind::Pattern,
            prompt_template_id: None,
            levels: h.levels,
            min_community_size: h.min_community_size,
            lp_max_iters: h.lp_max_iters,
            workers: 4,
        }
    }
}

impl KgConfig {
    pub fn extractor_spec(&self) -> ExtractorSpec {
        ExtractorSpec {
            kind: self.extractor,
            prompt_template_id: self.prompt_template_id.clone(),
        }
    }

    pub fn hierarchy(&self) -> HierarchyConfig {
        HierarchyConfig {
            levels: self.levels,
            min_community_size: self.min_community_size,
            lp_max_iters: self.lp_max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub max_steps: usize,
}

impl Default for AgentSection {
    fn default() -> Self {
        AgentSection { max_steps: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub port: u16,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct WorkspaceConfig {
    /// Relative paths resolve against the config file's directory.
    pub workspace_dir: Option<PathBuf>,
    pub embedder: EmbedderSpec,
    /// Absent means no language model; model-backed steps fall back or fail.
    pub gateway: Option<ProviderSpec>,
    pub templates_dir: Option<PathBuf>,
    pub chunk: ChunkPolicy,
    pub fulltext: FulltextConfig,
    pub fusion: FusionDefaults,
    pub kg: KgConfig,
    pub agent: AgentSection,
    pub writer: WriterConfig,
    pub server: ServerConfig,
}

impl WorkspaceConfig {
    pub fn validate(&self) -> Result<()> {
        self.embedder.validate()?;
        if let Some(g) = &self.gateway {
            g.validate()?;
        }
        if self.chunk.validate().is_err() {
            return Err(Error::config("chunk.overlap", "overlap must be smaller than window"));
        }
        if self.fulltext.k1.is_nan() || self.fulltext.k1 < 0.0 {
            return Err(Error::config("fulltext.k1", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.fulltext.b) {
            return Err(Error::config("fulltext.b", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.fusion.alpha) {
            return Err(Error::config("fusion.alpha", "alpha must lie in [0, 1]"));
        }
        if self.fusion.k == 0 {
            return Err(Error::config("fusion.k", "k must be at least 1"));
        }
        self.kg.extractor_spec().validate()?;
        self.kg.hierarchy().validate()?;
        if self.kg.workers == 0 {
            return Err(Error::config("kg.workers", "must be at least 1"));
        }
        if self.agent.max_steps == 0 {
            return Err(Error::config("agent.max_steps", "must be at least 1"));
        }
        self.writer.validate()
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            max_steps: self.agent.max_steps,
            k: self.fusion.k,
            fusion: self.fusion.fusion,
            alpha: self.fusion.alpha,
            sources: self.fusion.sources.clone(),
            rerank: Some(self.fusion.rerank),
        }
    }

    fn apply_env(&mut self, env: &dyn Fn(&str) -> Option<String>) {
        if let Some(endpoint) = env(ENV_ENDPOINT).filter(|e| !e.is_empty()) {
            match &mut self.gateway {
                Some(g) => g.endpoint = Some(endpoint),
                None => self.gateway = Some(ProviderSpec::remote(endpoint, "default")),
            }
        }
        if let (Some(key), Some(g)) = (env(ENV_API_KEY), &mut self.gateway) {
            g.api_key = Some(key);
        }
    }
}

/// Parse a config document. The error key is the dotted path of the
/// offending field.
pub fn parse_config(text: &str) -> Result<WorkspaceConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: WorkspaceConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." || path.is_empty() { "config".to_string() } else { path };
        Error::config(key, e.inner().message().to_string())
    })?;
    Ok(cfg)
}

/// Load `path` (missing file means defaults), apply overrides from `env`,
/// fill `workspace_dir` and validate.
pub fn load_config_with(
    path: &Path,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<WorkspaceConfig> {
    let mut cfg = match fs::read_to_string(path) {
        Ok(text) => parse_config(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => WorkspaceConfig::default(),
        Err(e) => return Err(e.into()),
    };
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.workspace_dir = Some(match cfg.workspace_dir.take() {
        Some(dir) if dir.is_relative() => base.join(dir),
        Some(dir) => dir,
        None => base.to_path_buf(),
    });
    for p in [
        cfg.templates_dir.as_mut(),
        cfg.gateway.as_mut().and_then(|g| g.fixtures_path.as_mut()),
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    cfg.apply_env(env);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<WorkspaceConfig> {
    load_config_with(path, &|k| std::env::var(k).ok())
}
