//! Chat-completion access behind one trait.
//!
//! Two providers ship: [`RemoteChatProvider`] speaks the chat-completions JSON
//! wire format over HTTP with bounded retries, and [`ScriptedProvider`] replays
//! canned responses keyed by the SHA-256 of the canonicalized messages. Every
//! network call in the crate goes through this module.

mod remote;
mod templates;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use remote::{
    HttpRequest, InflightLimiter, RemoteChatProvider, ReqwestTransport, RetryPolicy, Sleeper,
    Transport, TransportError,
};
pub use templates::{bindings, PromptTemplate, TemplateCatalog};

pub const ENV_ENDPOINT: &str = "HETA_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "HETA_LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f32,
    pub max_tokens: u32,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<Completion>;
}

impl<P: ChatProvider + ?Sized> ChatProvider for &P {
    fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<Completion> {
        (**self).complete(messages, params)
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Box<P> {
    fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<Completion> {
        (**self).complete(messages, params)
    }
}

/// Convenience: one user message with default params, returning the text.
pub fn complete_prompt(provider: &dyn ChatProvider, prompt: String) -> Result<String> {
    provider
        .complete(&[ChatMessage::user(prompt)], &CompletionParams::default())
        .map(|c| c.text)
}

fn validate_messages(messages: &[ChatMessage]) -> Result<()> {
    if messages.is_empty() {
        return Err(Error::MalformedInput("no messages".into()));
    }
    if messages.iter().any(|m| m.content.is_empty()) {
        return Err(Error::MalformedInput("chat message content must be nonempty".into()));
    }
    Ok(())
}

/// Canonical text of a message list: one `role: content` entry per message,
/// LF line endings.
pub fn canonical_messages(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(m.role.as_str());
        out.push_str(": ");
        out.push_str(&m.content.replace("\r\n", "\n").replace('\r', "\n"));
        out.push('\n');
    }
    out
}

/// Hex SHA-256 of [`canonical_messages`].
pub fn fixture_key(messages: &[ChatMessage]) -> String {
    let digest = Sha256::digest(canonical_messages(messages).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn approx_tokens(text: &str) -> u64 {
    crate::tokenize::tokenize(text).len() as u64
}

impl<P: ChatProvider + ?Sized> ChatProvider for std::sync::Arc<P> {
    fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<Completion> {
        (**self).complete(messages, params)
    }
}

/// Replays canned responses. An unregistered prompt is an error.
#[derive(Debug, Clone, Default)]
pub struct ScriptedProvider {
    fixtures: HashMap<String, String>,
}

impl ScriptedProvider {
    pub fn new(fixtures: HashMap<String, String>) -> Self {
        ScriptedProvider { fixtures }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let fixtures: HashMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| Error::MalformedInput(format!("fixtures {}: {e}", path.display())))?;
        Ok(ScriptedProvider { fixtures })
    }

    pub fn insert(&mut self, messages: &[ChatMessage], response: impl Into<String>) {
        self.fixtures.insert(fixture_key(messages), response.into());
    }

    /// Register a response for a single user prompt.
    pub fn insert_prompt(&mut self, prompt: impl Into<String>, response: impl Into<String>) {
        self.insert(&[ChatMessage::user(prompt)], response);
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, messages: &[ChatMessage], _params: &CompletionParams) -> Result<Completion> {
        validate_messages(messages)?;
        let key = fixture_key(messages);
        let text = self
            .fixtures
            .get(&key)
            .ok_or(Error::FixtureMissing(key))?
            .clone();
        Ok(Completion {
            usage: Usage {
                prompt_tokens: approx_tokens(&canonical_messages(messages)),
                completion_tokens: approx_tokens(&text),
            },
            text,
        })
    }
}

/// Wraps a provider and records every successful exchange as a fixture.
pub struct RecordingProvider<P> {
    inner: P,
    recorded: Mutex<BTreeMap<String, String>>,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        RecordingProvider {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn fixtures(&self) -> BTreeMap<String, String> {
        self.recorded.lock().expect("recording lock").clone()
    }

    /// Fixtures as a JSON map, sorted by key.
    pub fn fixtures_json(&self) -> String {
        serde_json::to_string_pretty(&self.fixtures()).expect("string map serializes")
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<Completion> {
        let completion = self.inner.complete(messages, params)?;
        self.recorded
            .lock()
            .expect("recording lock")
            .insert(fixture_key(messages), completion.text.clone());
        Ok(completion)
    }
}

/// Stand-in when no provider is configured; every call fails with
/// [`Error::ProviderUnavailable`] so callers take their fallback paths.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnavailableProvider;

impl ChatProvider for UnavailableProvider {
    fn complete(&self, _: &[ChatMessage], _: &CompletionParams) -> Result<Completion> {
        Err(Error::ProviderUnavailable("no chat provider configured".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    RemoteChat,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub fixtures_path: Option<PathBuf>,
    #[serde(default = "default_max_inflight")]
    pub max_inflight: usize,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
}

fn default_model() -> String {
    "default".into()
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    2
}
fn default_max_inflight() -> usize {
    4
}

impl ProviderSpec {
    pub fn scripted(fixtures_path: impl Into<PathBuf>) -> Self {
        ProviderSpec {
            kind: ProviderKind::Scripted,
            endpoint: None,
            model: default_model(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            fixtures_path: Some(fixtures_path.into()),
            max_inflight: default_max_inflight(),
            api_key: None,
        }
    }

    pub fn remote(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        ProviderSpec {
            kind: ProviderKind::RemoteChat,
            endpoint: Some(endpoint.into()),
            model: model.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            fixtures_path: None,
            max_inflight: default_max_inflight(),
            api_key: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ProviderKind::RemoteChat if self.endpoint.as_deref().unwrap_or("").is_empty() => {
                Err(Error::config("gateway.endpoint", "remote_chat requires an endpoint"))
            }
            ProviderKind::Scripted if self.fixtures_path.is_none() => Err(Error::config(
                "gateway.fixtures_path",
                "scripted provider requires fixtures_path",
            )),
            _ if self.max_inflight == 0 => {
                Err(Error::config("gateway.max_inflight", "must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn ChatProvider>> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::Scripted => Box::new(ScriptedProvider::from_file(
                self.fixtures_path.as_deref().expect("validated"),
            )?),
            ProviderKind::RemoteChat => Box::new(RemoteChatProvider::from_spec(self)?),
        })
    }
}
