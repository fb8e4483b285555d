//! Uniform LLM backend contract with three interchangeable implementations:
//! a live HTTP chat-completion client, a deterministic scripted mock, and a
//! record/replay cassette backend. Pipelines depend only on the [`Backend`]
//! trait, so every run is hermetically testable.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("temperature {0} outside [0.0, 2.0]")]
    TemperatureOutOfRange(f64),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("replay store has no entry for tag {0}")]
    ReplayMiss(String),
    #[error("mock script has no matcher for tag {0}")]
    ScriptMiss(String),
    #[error("invalid cassette: {0}")]
    InvalidCassette(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One single-turn completion request. The `request_tag` is a stable
/// 128-bit content hash of (system_text, user_text, temperature, model_id)
/// used as the replay key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_id: String,
    pub request_tag: String,
}

impl PromptRequest {
    pub fn new(
        system_text: impl Into<String>,
        user_text: impl Into<String>,
        temperature: f64,
        max_tokens: u32,
        model_id: impl Into<String>,
    ) -> Result<Self, GatewayError> {
        if !(0.0..=2.0).contains(&temperature) {
            return Err(GatewayError::TemperatureOutOfRange(temperature));
        }
        let system_text = system_text.into();
        let user_text = user_text.into();
        let model_id = model_id.into();
        let request_tag = compute_tag(&system_text, &user_text, temperature, &model_id);
        Ok(PromptRequest {
            system_text,
            user_text,
            temperature,
            max_tokens,
            model_id,
            request_tag,
        })
    }

    /// Requests at temperature 0.0 are deterministic by contract; the
    /// self-consistency degeneracy invariant relies on this flag.
    pub fn is_deterministic(&self) -> bool {
        self.temperature == 0.0
    }
}

fn compute_tag(system: &str, user: &str, temperature: f64, model: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(system.as_bytes());
    hasher.update([0]);
    hasher.update(user.as_bytes());
    hasher.update([0]);
    hasher.update(format!("{temperature}").as_bytes());
    hasher.update([0]);
    hasher.update(model.as_bytes());
    let digest = hasher.finalize();
    // 128 bits is plenty for collision-free keying
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
    pub from_cache: bool,
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &PromptRequest) -> Result<Completion, GatewayError>;
    fn backend_id(&self) -> &str;
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, req: &PromptRequest) -> Result<Completion, GatewayError> {
        (**self).complete(req)
    }
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
}

/// Run a batch of requests with bounded concurrency. Results stay
/// positionally aligned with the inputs; per-request failures are surfaced
/// in place without aborting the batch.
pub fn complete_batch(
    backend: &dyn Backend,
    reqs: &[PromptRequest],
    max_in_flight: usize,
) -> Vec<Result<Completion, GatewayError>> {
    assert!(max_in_flight >= 1, "max_in_flight must be at least 1");
    if max_in_flight == 1 || reqs.len() <= 1 {
        return reqs.iter().map(|r| backend.complete(r)).collect();
    }
    let mut results = Vec::with_capacity(reqs.len());
    for chunk in reqs.chunks(max_in_flight) {
        let chunk_results: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|req| scope.spawn(move || backend.complete(req)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        results.extend(chunk_results);
    }
    results
}

// ---------------------------------------------------------------------------
// Mock backend

enum MockRule {
    Tag(String, String),
    Contains(String, String),
}

type MockHandler = Box<dyn Fn(&PromptRequest) -> Option<String> + Send + Sync>;

/// Deterministic scripted backend: responses keyed by request tag, by a
/// substring of the prompt, or by an arbitrary handler (tests only).
#[derive(Default)]
pub struct MockBackend {
    rules: Vec<MockRule>,
    handler: Option<MockHandler>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn script_tag(mut self, tag: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(MockRule::Tag(tag.into(), response.into()));
        self
    }

    /// Respond when `needle` occurs in the user or system text. Rules are
    /// tried in insertion order, tag rules first.
    pub fn script_contains(
        mut self,
        needle: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        self.rules
            .push(MockRule::Contains(needle.into(), response.into()));
        self
    }

    pub fn with_handler(
        mut self,
        handler: impl Fn(&PromptRequest) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.handler = Some(Box::new(handler));
        self
    }

    /// Load matcher rules from a JSONL script file: each line is
    /// `{"tag": ..., "response": ...}` or `{"contains": ..., "response": ...}`.
    pub fn from_script_file(path: &Path) -> Result<Self, GatewayError> {
        #[derive(Deserialize)]
        struct ScriptLine {
            tag: Option<String>,
            contains: Option<String>,
            response: String,
        }
        let file = std::fs::File::open(path)?;
        let mut mock = MockBackend::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptLine = serde_json::from_str(&line)
                .map_err(|e| GatewayError::InvalidCassette(format!("mock script: {e}")))?;
            match (entry.tag, entry.contains) {
                (Some(tag), _) => mock.rules.push(MockRule::Tag(tag, entry.response)),
                (None, Some(needle)) => {
                    mock.rules.push(MockRule::Contains(needle, entry.response))
                }
                (None, None) => {
                    return Err(GatewayError::InvalidCassette(
                        "mock script line needs a tag or contains key".into(),
                    ))
                }
            }
        }
        Ok(mock)
    }

    fn lookup(&self, req: &PromptRequest) -> Option<String> {
        for rule in &self.rules {
            if let MockRule::Tag(tag, response) = rule {
                if *tag == req.request_tag {
                    return Some(response.clone());
                }
            }
        }
        for rule in &self.rules {
            if let MockRule::Contains(needle, response) = rule {
                if req.user_text.contains(needle.as_str())
                    || req.system_text.contains(needle.as_str())
                {
                    return Some(response.clone());
                }
            }
        }
        self.handler.as_ref().and_then(|h| h(req))
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &PromptRequest) -> Result<Completion, GatewayError> {
        match self.lookup(req) {
            Some(text) => Ok(Completion {
                text,
                backend_id: self.backend_id().to_string(),
                latency_ms: 0,
                from_cache: false,
            }),
            None => Err(GatewayError::ScriptMiss(req.request_tag.clone())),
        }
    }

    fn backend_id(&self) -> &str {
        "mock"
    }
}

// ---------------------------------------------------------------------------
// Record / replay

/// One cassette line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub tag: String,
    pub request_digest: String,
    pub response_text: String,
    pub model_id: String,
}

/// Replays recorded completions keyed by request tag. Unknown tags are a
/// hard [`GatewayError::ReplayMiss`]; there is no fall-through to live.
pub struct ReplayBackend {
    entries: BTreeMap<String, CassetteEntry>,
}

impl ReplayBackend {
    pub fn from_cassette(path: &Path) -> Result<Self, GatewayError> {
        let file = std::fs::File::open(path)?;
        let mut entries = BTreeMap::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line)
                .map_err(|e| GatewayError::InvalidCassette(e.to_string()))?;
            entries.insert(entry.tag.clone(), entry);
        }
        Ok(ReplayBackend { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, req: &PromptRequest) -> Result<Completion, GatewayError> {
        match self.entries.get(&req.request_tag) {
            Some(entry) => Ok(Completion {
                text: entry.response_text.clone(),
                backend_id: self.backend_id().to_string(),
                latency_ms: 0,
                from_cache: true,
            }),
            None => Err(GatewayError::ReplayMiss(req.request_tag.clone())),
        }
    }

    fn backend_id(&self) -> &str {
        "replay"
    }
}

/// Wraps another backend and persists every successful completion to a
/// cassette for later replay. Writes are serialized internally.
pub struct RecordingBackend<B: Backend> {
    inner: B,
    writer: Mutex<std::io::BufWriter<std::fs::File>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B, cassette_path: &Path) -> Result<Self, GatewayError> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(cassette_path)?;
        Ok(RecordingBackend {
            inner,
            writer: Mutex::new(std::io::BufWriter::new(file)),
        })
    }

    /// Stop recording, flushing the cassette and returning the inner backend.
    pub fn finish(self) -> Result<B, GatewayError> {
        self.writer.into_inner().unwrap().flush()?;
        Ok(self.inner)
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, req: &PromptRequest) -> Result<Completion, GatewayError> {
        let completion = self.inner.complete(req)?;
        let entry = CassetteEntry {
            tag: req.request_tag.clone(),
            request_digest: req.request_tag.clone(),
            response_text: completion.text.clone(),
            model_id: req.model_id.clone(),
        };
        let mut writer = self.writer.lock().unwrap();
        serde_json::to_writer(&mut *writer, &entry)
            .map_err(|e| GatewayError::InvalidCassette(e.to_string()))?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(completion)
    }

    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }
}

// ---------------------------------------------------------------------------
// Live HTTP backend

/// Live chat-completion client: HTTP POST of
/// `{model, messages, temperature, max_tokens}` with bearer-token auth.
/// Retries up to 3 attempts with exponential backoff starting at 1 s, on
/// transport errors and HTTP 429/5xx only.
pub struct LiveBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: String,
    max_attempts: u32,
    base_backoff: Duration,
}

impl LiveBackend {
    pub fn new(url: impl Into<String>, api_key: impl Into<String>) -> Self {
        LiveBackend {
            client: reqwest::blocking::Client::new(),
            url: url.into(),
            api_key: api_key.into(),
            max_attempts: 3,
            base_backoff: Duration::from_secs(1),
        }
    }

    /// Configure from `NOTAMKIT_API_URL` and `NOTAMKIT_API_KEY`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let url = std::env::var("NOTAMKIT_API_URL")
            .map_err(|_| GatewayError::BackendUnavailable("NOTAMKIT_API_URL not set".into()))?;
        let api_key = std::env::var("NOTAMKIT_API_KEY").unwrap_or_default();
        Ok(LiveBackend::new(url, api_key))
    }

    fn attempt(&self, req: &PromptRequest) -> Result<String, (bool, String)> {
        let body = serde_json::json!({
            "model": req.model_id,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": req.user_text},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let response = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| (true, format!("transport: {e}")))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err((true, format!("http {status}")));
        }
        if !status.is_success() {
            return Err((false, format!("http {status}")));
        }
        let payload: serde_json::Value = response
            .json()
            .map_err(|e| (false, format!("bad response body: {e}")))?;
        payload["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or((false, "response missing choices[0].message.content".into()))
    }
}

impl Backend for LiveBackend {
    fn complete(&self, req: &PromptRequest) -> Result<Completion, GatewayError> {
        let start = Instant::now();
        let mut last_error = String::new();
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.base_backoff * 2u32.pow(attempt - 1));
            }
            match self.attempt(req) {
                Ok(text) => {
                    return Ok(Completion {
                        text,
                        backend_id: self.backend_id().to_string(),
                        latency_ms: start.elapsed().as_millis() as u64,
                        from_cache: false,
                    })
                }
                Err((retryable, msg)) => {
                    last_error = msg;
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(GatewayError::BackendUnavailable(last_error))
    }

    fn backend_id(&self) -> &str {
        "live"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(user: &str, temperature: f64) -> PromptRequest {
        PromptRequest::new("sys", user, temperature, 512, "test-model").unwrap()
    }

    #[test]
    fn tag_is_deterministic_and_input_sensitive() {
        let a = req("hello", 0.0);
        let b = req("hello", 0.0);
        let c = req("hello!", 0.0);
        let d = req("hello", 0.3);
        assert_eq!(a.request_tag, b.request_tag);
        assert_ne!(a.request_tag, c.request_tag);
        assert_ne!(a.request_tag, d.request_tag);
        assert_eq!(a.request_tag.len(), 32);
    }

    #[test]
    fn temperature_range_enforced() {
        assert!(PromptRequest::new("s", "u", 2.5, 16, "m").is_err());
        assert!(PromptRequest::new("s", "u", -0.1, 16, "m").is_err());
    }

    #[test]
    fn mock_scripted_echo() {
        let r = req("extract runway", 0.0);
        let mock = MockBackend::new().script_tag(&r.request_tag, r#"{"runway":"18L"}"#);
        let completion = mock.complete(&r).unwrap();
        assert_eq!(completion.text, r#"{"runway":"18L"}"#);
        assert!(!completion.from_cache);
        // same request, identical completion
        assert_eq!(mock.complete(&r).unwrap(), completion);
    }

    #[test]
    fn mock_miss_is_script_miss() {
        let mock = MockBackend::new();
        assert!(matches!(
            mock.complete(&req("x", 0.0)),
            Err(GatewayError::ScriptMiss(_))
        ));
    }

    #[test]
    fn batch_preserves_order_and_surfaces_errors_in_place() {
        let r1 = req("one", 0.0);
        let r2 = req("two", 0.0);
        let r3 = req("three", 0.0);
        let mock = MockBackend::new()
            .script_contains("one", "1")
            .script_contains("three", "3");
        let results = complete_batch(&mock, &[r1, r2, r3], 2);
        assert_eq!(results.len(), 3);
        assert_eq!(results[0].as_ref().unwrap().text, "1");
        assert!(matches!(results[1], Err(GatewayError::ScriptMiss(_))));
        assert_eq!(results[2].as_ref().unwrap().text, "3");
        assert!(complete_batch(&mock, &[], 2).is_empty());
    }

    #[test]
    fn record_then_replay_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cassette = dir.path().join("session.jsonl");
        let r1 = req("first call", 0.0);
        let r2 = req("second call", 0.0);
        let inner = MockBackend::new()
            .script_contains("first", "response one")
            .script_contains("second", "response two");
        let recorder = RecordingBackend::new(inner, &cassette).unwrap();
        let c1 = recorder.complete(&r1).unwrap();
        let c2 = recorder.complete(&r2).unwrap();
        recorder.finish().unwrap();

        let replay = ReplayBackend::from_cassette(&cassette).unwrap();
        assert_eq!(replay.len(), 2);
        let p1 = replay.complete(&r1).unwrap();
        let p2 = replay.complete(&r2).unwrap();
        assert_eq!(p1.text, c1.text);
        assert_eq!(p2.text, c2.text);
        assert!(p1.from_cache);

        assert!(matches!(
            replay.complete(&req("never recorded", 0.0)),
            Err(GatewayError::ReplayMiss(_))
        ));
    }

    #[test]
    fn recording_to_unwritable_path_is_io_error() {
        let result = RecordingBackend::new(MockBackend::new(), Path::new("/nonexistent-dir/c.jsonl"));
        assert!(matches!(result, Err(GatewayError::Io(_))));
    }
}
