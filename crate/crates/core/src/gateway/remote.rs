//! HTTP chat-completions client with bounded retries.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use tracing::warn;

use super::{validate_messages, ChatMessage, ChatProvider, Completion, CompletionParams, ProviderSpec, Usage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpRequest {
    pub url: String,
    pub body: Value,
    pub bearer: Option<String>,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Status(u16, String),
    Connect(String),
    Decode(String),
}

impl TransportError {
    /// Timeouts and server-side failures are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Timeout => true,
            TransportError::Status(code, _) => *code >= 500,
            TransportError::Connect(_) | TransportError::Decode(_) => false,
        }
    }
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Timeout => write!(f, "request timed out"),
            TransportError::Status(code, body) => write!(f, "HTTP {code}: {body}"),
            TransportError::Connect(msg) => write!(f, "connection failed: {msg}"),
            TransportError::Decode(msg) => write!(f, "invalid response body: {msg}"),
        }
    }
}

/// Sends one JSON POST. Swappable so retry behaviour can be tested without a network.
pub trait Transport: Send + Sync {
    fn post_json(&self, request: &HttpRequest) -> std::result::Result<Value, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| Error::ProviderUnavailable(format!("building HTTP client: {e}")))?;
        Ok(ReqwestTransport { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(&self, request: &HttpRequest) -> std::result::Result<Value, TransportError> {
        let mut builder = self
            .client
            .post(&request.url)
            .timeout(request.timeout)
            .json(&request.body);
        if let Some(key) = &request.bearer {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(TransportError::Status(status.as_u16(), body));
        }
        response.json::<Value>().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Decode(e.to_string())
            }
        })
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Exponential backoff: the delay before retry `i` (0-based) is `base * 2^i`.
#[derive(Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub sleeper: Sleeper,
}

impl std::fmt::Debug for RetryPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetryPolicy")
            .field("max_retries", &self.max_retries)
            .field("base_delay", &self.base_delay)
            .finish()
    }
}

impl RetryPolicy {
    pub fn new(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay: Duration::from_millis(250),
            sleeper: Arc::new(std::thread::sleep),
        }
    }

    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1u32.checked_shl(retry).unwrap_or(u32::MAX))
    }

    /// Run `op` until it succeeds, fails with a non-retryable error, or the
    /// retry budget is spent.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> std::result::Result<T, TransportError>,
    ) -> std::result::Result<T, TransportError> {
        let mut retry = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && retry < self.max_retries => {
                    let delay = self.delay(retry);
                    warn!(error = %e, attempt = retry + 1, ?delay, "retrying request");
                    (self.sleeper)(delay);
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Counting semaphore bounding concurrent in-flight requests.
#[derive(Debug)]
pub struct InflightLimiter {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl InflightLimiter {
    pub fn new(max: usize) -> Self {
        InflightLimiter {
            slots: Mutex::new(max.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut slots = self.slots.lock().expect("limiter lock");
            while *slots == 0 {
                slots = self.freed.wait(slots).expect("limiter lock");
            }
            *slots -= 1;
        }
        let out = f();
        *self.slots.lock().expect("limiter lock") += 1;
        self.freed.notify_one();
        out
    }
}

pub struct RemoteChatProvider {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
    retry: RetryPolicy,
    limiter: InflightLimiter,
    transport: Box<dyn Transport>,
}

impl RemoteChatProvider {
    pub fn from_spec(spec: &ProviderSpec) -> Result<Self> {
        Ok(Self::with_transport(spec, Box::new(ReqwestTransport::new()?)))
    }

    pub fn with_transport(spec: &ProviderSpec, transport: Box<dyn Transport>) -> Self {
        RemoteChatProvider {
            endpoint: spec.endpoint.clone().unwrap_or_default(),
            model: spec.model.clone(),
            api_key: spec.api_key.clone(),
            timeout: Duration::from_millis(spec.timeout_ms),
            retry: RetryPolicy::new(spec.max_retries),
            limiter: InflightLimiter::new(spec.max_inflight),
            transport,
        }
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn url(&self, path: &str) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with(path) {
            base.to_string()
        } else {
            format!("{base}/{path}")
        }
    }

    fn post(&self, path: &str, body: Value) -> Result<Value> {
        let request = HttpRequest {
            url: self.url(path),
            body,
            bearer: self.api_key.clone(),
            timeout: self.timeout,
        };
        self.limiter
            .run(|| self.retry.run(|| self.transport.post_json(&request)))
            .map_err(|e| Error::ProviderUnavailable(format!("{}: {e}", request.url)))
    }

    /// Embed one text through the `/embeddings` route of the same endpoint.
    pub fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let response = self.post("embeddings", json!({ "model": self.model, "input": text }))?;
        let values = response["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| Error::ProviderUnavailable("embedding response missing data[0].embedding".into()))?;
        values
            .iter()
            .map(|v| {
                v.as_f64()
                    .map(|x| x as f32)
                    .ok_or_else(|| Error::ProviderUnavailable("non-numeric embedding value".into()))
            })
            .collect()
    }

    /// Score `documents` against `query` through a `/rerank` route
    /// (`{"results": [{"index", "relevance_score"}]}`). Scores come back in
    /// input order.
    pub fn rerank(&self, query: &str, documents: &[String]) -> Result<Vec<f64>> {
        let response = self.post(
            "rerank",
            json!({ "model": self.model, "query": query, "documents": documents }),
        )?;
        let results = response["results"]
            .as_array()
            .ok_or_else(|| Error::ProviderUnavailable("rerank response missing results".into()))?;
        let mut scores = vec![None; documents.len()];
        for r in results {
            let index = r["index"].as_u64().map(|i| i as usize);
            let score = r["relevance_score"].as_f64();
            match (index, score) {
                (Some(i), Some(x)) if i < scores.len() => scores[i] = Some(x),
                _ => return Err(Error::ProviderUnavailable("malformed rerank result".into())),
            }
        }
        scores
            .into_iter()
            .map(|s| s.ok_or_else(|| Error::ProviderUnavailable("rerank result missing a document".into())))
            .collect()
    }
}

impl ChatProvider for RemoteChatProvider {
    fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<Completion> {
        validate_messages(messages)?;
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let response = self.post("chat/completions", body)?;
        let text = response["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| {
                Error::ProviderUnavailable("response missing choices[0].message.content".into())
            })?
            .to_string();
        let usage = Usage {
            prompt_tokens: response["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: response["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        Ok(Completion { text, usage })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Fails the first `failures` calls with `error`, then answers.
    struct FlakyTransport {
        failures: usize,
        error: TransportError,
        calls: Arc<AtomicUsize>,
        seen: Mutex<Vec<HttpRequest>>,
    }

    impl Transport for FlakyTransport {
        fn post_json(&self, request: &HttpRequest) -> std::result::Result<Value, TransportError> {
            self.seen.lock().unwrap().push(request.clone());
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                return Err(self.error.clone());
            }
            Ok(json!({
                "choices": [{"message": {"role": "assistant", "content": "ok"}}],
                "usage": {"prompt_tokens": 3, "completion_tokens": 1}
            }))
        }
    }

    fn provider(
        failures: usize,
        error: TransportError,
        max_retries: u32,
    ) -> (RemoteChatProvider, Arc<AtomicUsize>, Arc<Mutex<Vec<Duration>>>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let delays = Arc::new(Mutex::new(Vec::new()));
        let mut spec = ProviderSpec::remote("http://llm.local/v1", "m");
        spec.max_retries = max_retries;
        spec.api_key = Some("secret".into());
        let transport = FlakyTransport {
            failures,
            error,
            calls: calls.clone(),
            seen: Mutex::new(Vec::new()),
        };
        let recorded = delays.clone();
        let policy = RetryPolicy {
            max_retries,
            base_delay: Duration::from_millis(250),
            sleeper: Arc::new(move |d| recorded.lock().unwrap().push(d)),
        };
        let p = RemoteChatProvider::with_transport(&spec, Box::new(transport)).with_retry_policy(policy);
        (p, calls, delays)
    }

    #[test]
    fn two_timeouts_then_success() {
        let (p, calls, delays) = provider(2, TransportError::Timeout, 2);
        let out = p
            .complete(&[ChatMessage::user("hi")], &CompletionParams::default())
            .unwrap();
        assert_eq!(out.text, "ok");
        assert_eq!(out.usage.prompt_tokens, 3);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(
            *delays.lock().unwrap(),
            [Duration::from_millis(250), Duration::from_millis(500)]
        );
    }

    #[test]
    fn retries_exhausted() {
        let (p, calls, delays) = provider(10, TransportError::Status(503, "busy".into()), 2);
        let err = p
            .complete(&[ChatMessage::user("hi")], &CompletionParams::default())
            .unwrap_err();
        assert!(matches!(err, Error::ProviderUnavailable(_)));
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        let d = delays.lock().unwrap();
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn client_errors_not_retried() {
        let (p, calls, _) = provider(10, TransportError::Status(400, "bad".into()), 2);
        assert!(p
            .complete(&[ChatMessage::user("hi")], &CompletionParams::default())
            .is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn url_joining() {
        let (p, _, _) = provider(0, TransportError::Timeout, 0);
        assert_eq!(p.url("chat/completions"), "http://llm.local/v1/chat/completions");
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Arc::new(InflightLimiter::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let (limiter, active, peak) = (limiter.clone(), active.clone(), peak.clone());
                s.spawn(move || {
                    limiter.run(|| {
                        let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                        peak.fetch_max(now, Ordering::SeqCst);
                        std::thread::sleep(Duration::from_millis(5));
                        active.fetch_sub(1, Ordering::SeqCst);
                    })
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
