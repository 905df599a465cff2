//! Dense text embeddings.
//!
//! The built-in [`HashEmbedder`] is a signed feature-hashing embedder: each
//! token is hashed with 64-bit FNV-1a, `hash % dim` selects a bucket and the
//! top bit of the hash selects the sign. The result is L2-normalized, and text
//! without tokens maps to the all-zero vector. It is bit-reproducible in any
//! language, which is what the test oracles rely on.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{ProviderSpec, RemoteChatProvider};
use crate::tokenize::tokenize;

pub const DEFAULT_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// A dense vector that is either unit-length or all zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    /// Scale to unit length; zero input stays zero.
    pub fn normalized(raw: &[f64]) -> Self {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return EmbeddingVector(vec![0.0; raw.len()]);
        }
        EmbeddingVector(raw.iter().map(|x| (x / norm) as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }
}

/// Cosine of two unit-or-zero vectors. Anything against a zero vector is 0.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if a.is_zero() || b.is_zero() {
        return Ok(0.0);
    }
    Ok(a.dot(b).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim }
    }

    pub fn bucket_and_sign(&self, token: &str) -> (usize, f64) {
        let h = fnv1a64(token.as_bytes());
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_DIM)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut raw = vec![0.0f64; self.dim];
        for token in tokenize(text) {
            let (bucket, sign) = self.bucket_and_sign(&token);
            raw[bucket] += sign;
        }
        Ok(EmbeddingVector::normalized(&raw))
    }
}

/// Embeddings from an HTTP `/embeddings` endpoint, renormalized to unit length.
pub struct RemoteEmbedder {
    dim: usize,
    max_inflight: usize,
    client: RemoteChatProvider,
}

impl RemoteEmbedder {
    pub fn new(dim: usize, max_inflight: usize, client: RemoteChatProvider) -> Self {
        RemoteEmbedder {
            dim,
            max_inflight: max_inflight.max(1),
            client,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if tokenize(text).is_empty() {
            return Ok(EmbeddingVector::zeros(self.dim));
        }
        let raw = self.client.embed(text)?;
        if raw.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: raw.len(),
            });
        }
        let raw: Vec<f64> = raw.into_iter().map(f64::from).collect();
        Ok(EmbeddingVector::normalized(&raw))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<EmbeddingVector>>>> =
            texts.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..self.max_inflight.min(texts.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= texts.len() {
                        break;
                    }
                    *slots[i].lock().expect("slot lock") = Some(self.embed(&texts[i]));
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    DeterministicHash,
    RemoteHttp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dim: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            kind: EmbedderKind::DeterministicHash,
            dim: DEFAULT_DIM,
            endpoint: None,
            model_name: None,
        }
    }
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("embedder.dim", "must be positive"));
        }
        if self.kind == EmbedderKind::RemoteHttp && self.endpoint.as_deref().unwrap_or("").is_empty() {
            return Err(Error::config("embedder.endpoint", "remote_http requires an endpoint"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::DeterministicHash => Box::new(HashEmbedder::new(self.dim)),
            EmbedderKind::RemoteHttp => {
                let mut spec = ProviderSpec::remote(
                    self.endpoint.clone().unwrap_or_default(),
                    self.model_name.clone().unwrap_or_else(|| "default".into()),
                );
                spec.api_key = std::env::var(crate::gateway::ENV_API_KEY).ok();
                let max_inflight = spec.max_inflight;
                Box::new(RemoteEmbedder::new(
                    self.dim,
                    max_inflight,
                    RemoteChatProvider::from_spec(&spec)?,
                ))
            }
        })
    }
}

pub fn embed_text(spec: &EmbedderSpec, text: &str) -> Result<EmbeddingVector> {
    spec.build()?.embed(text)
}

pub fn embed_batch(spec: &EmbedderSpec, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
    spec.build()?.embed_batch(texts)
}
