//! Chat-completions client (`POST {base_url}/chat/completions`) with bounded
//! retries, a cap on in-flight requests and a JSONL record/replay cassette.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::correction::Detection;
use crate::model::{CanonPolicy, DataItem, ExtractionResult};
use crate::prompt::{ComposedPrompt, PromptComposer};

use super::{
    parse_detector_reply, parse_verdict, BackendError, DetectionKind, Detector, Extractor,
    PruneVerdict, Pruner, RawCompletion, TokenCounts,
};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "SCIR_API_KEY";

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Never written out; prefer the `SCIR_API_KEY` environment variable.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_ms: u64,
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    /// First backoff delay; doubles after each failed attempt.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key: None,
            timeout_ms: 120_000,
            max_attempts: 3,
            backoff_ms: 500,
            max_in_flight: 8,
            temperature: Some(0.0),
        }
    }
}

impl std::fmt::Debug for RemoteConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteConfig")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout_ms", &self.timeout_ms)
            .field("max_attempts", &self.max_attempts)
            .field("backoff_ms", &self.backoff_ms)
            .field("max_in_flight", &self.max_in_flight)
            .field("temperature", &self.temperature)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CassetteMode {
    /// Serve hits from the cassette, call the server on a miss and append.
    Record,
    /// Serve hits only; a miss is an error and the network is never used.
    Replay,
}

#[derive(Debug, Serialize, Deserialize)]
struct CassetteEntry {
    hash: String,
    request: Value,
    response: String,
}

/// Recorded replies keyed by request hash, shared by every client in a
/// process.
#[derive(Debug)]
pub struct Cassette {
    path: PathBuf,
    mode: CassetteMode,
    entries: Mutex<HashMap<String, String>>,
}

impl Cassette {
    pub fn open(path: &Path, mode: CassetteMode) -> Result<Self, BackendError> {
        let mut entries = HashMap::new();
        match std::fs::File::open(path) {
            Ok(file) => {
                for (idx, line) in BufReader::new(file).lines().enumerate() {
                    let line =
                        line.map_err(|e| BackendError::Unavailable(format!("cassette read: {e}")))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let entry: CassetteEntry = serde_json::from_str(&line).map_err(|e| {
                        BackendError::Unavailable(format!(
                            "cassette {} line {}: {e}",
                            path.display(),
                            idx + 1
                        ))
                    })?;
                    entries.insert(entry.hash, entry.response);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && mode == CassetteMode::Record => {}
            Err(e) => {
                return Err(BackendError::Unavailable(format!(
                    "cassette {}: {e}",
                    path.display()
                )))
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            mode,
            entries: Mutex::new(entries),
        })
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cassette poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, hash: &str) -> Option<String> {
        self.entries
            .lock()
            .expect("cassette poisoned")
            .get(hash)
            .cloned()
    }

    fn append(&self, hash: &str, request: &Value, response: &str) -> Result<(), BackendError> {
        let mut entries = self.entries.lock().expect("cassette poisoned");
        if entries.contains_key(hash) {
            return Ok(());
        }
        let line = serde_json::to_string(&CassetteEntry {
            hash: hash.to_string(),
            request: request.clone(),
            response: response.to_string(),
        })
        .expect("cassette entry serializes");
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| BackendError::Unavailable(format!("cassette write: {e}")))?;
        writeln!(file, "{line}")
            .map_err(|e| BackendError::Unavailable(format!("cassette write: {e}")))?;
        entries.insert(hash.to_string(), response.to_string());
        Ok(())
    }
}

#[derive(Debug)]
struct InFlight {
    limit: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut current = self.current.lock().expect("in-flight counter poisoned");
        while *current >= self.limit {
            current = self
                .freed
                .wait(current)
                .expect("in-flight counter poisoned");
        }
        *current += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.current.lock().expect("in-flight counter poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

/// Text and bookkeeping for one completed chat call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatReply {
    pub text: String,
    pub latency_ms: u64,
    pub token_counts: Option<TokenCounts>,
    pub from_cassette: bool,
}

/// Shared chat-completions client. Safe to call from many workers.
#[derive(Debug)]
pub struct ChatClient {
    http: reqwest::blocking::Client,
    config: RemoteConfig,
    cassette: Option<Arc<Cassette>>,
    in_flight: InFlight,
    http_requests: AtomicUsize,
}

impl ChatClient {
    /// `SCIR_API_KEY`, when set, takes precedence over `config.api_key`.
    pub fn new(
        mut config: RemoteConfig,
        cassette: Option<Arc<Cassette>>,
    ) -> Result<Self, BackendError> {
        if let Some(key) = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()) {
            config.api_key = Some(key);
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Unavailable(format!("building HTTP client: {e}")))?;
        Ok(Self {
            http,
            in_flight: InFlight::new(config.max_in_flight),
            config,
            cassette,
            http_requests: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// HTTP requests actually sent, retries included.
    pub fn http_requests(&self) -> usize {
        self.http_requests.load(Ordering::SeqCst)
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        if let Some(t) = self.config.temperature {
            body["temperature"] = json!(t);
        }
        body
    }

    pub fn request_hash(body: &Value) -> String {
        // serde_json maps are key-sorted, so this is canonical
        hex::encode(Sha256::digest(body.to_string().as_bytes()))
    }

    pub fn complete(&self, prompt: &str) -> Result<ChatReply, BackendError> {
        let body = self.request_body(prompt);
        let hash = Self::request_hash(&body);
        if let Some(cassette) = &self.cassette {
            if let Some(text) = cassette.get(&hash) {
                return Ok(ChatReply {
                    text,
                    latency_ms: 0,
                    token_counts: None,
                    from_cassette: true,
                });
            }
            if cassette.mode == CassetteMode::Replay {
                return Err(BackendError::Unavailable(format!(
                    "cassette miss for request {hash}"
                )));
            }
        }
        let reply = self.send_with_retries(&body)?;
        if let Some(cassette) = &self.cassette {
            cassette.append(&hash, &body, &reply.text)?;
        }
        Ok(reply)
    }

    fn send_with_retries(&self, body: &Value) -> Result<ChatReply, BackendError> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let attempts = self.config.max_attempts.max(1);
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut last_error = BackendError::Unavailable("no attempt made".into());
        for attempt in 1..=attempts {
            match self.send_once(&url, body) {
                Ok(reply) => return Ok(reply),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(e)) => {
                    log::warn!("chat request attempt {attempt}/{attempts} failed: {e}");
                    last_error = e;
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(last_error)
    }

    fn send_once(&self, url: &str, body: &Value) -> Result<ChatReply, Attempt> {
        let _permit = self.in_flight.acquire();
        self.http_requests.fetch_add(1, Ordering::SeqCst);
        let started = Instant::now();
        let mut request = self.http.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| Attempt::Retryable(BackendError::Unavailable(e.to_string())))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| Attempt::Retryable(BackendError::Unavailable(e.to_string())))?;
        if status.is_server_error() {
            return Err(Attempt::Retryable(BackendError::Unavailable(format!(
                "HTTP {status}: {text}"
            ))));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::Rejected {
                status: status.as_u16(),
                body: text,
            }));
        }
        let latency_ms = started.elapsed().as_millis() as u64;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(BackendError::BadResponse(e.to_string())))?;
        let content = parsed
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                Attempt::Fatal(BackendError::BadResponse(
                    "no choices[0].message.content".into(),
                ))
            })?;
        let token_counts = parsed.get("usage").and_then(|u| {
            Some(TokenCounts {
                prompt: u.get("prompt_tokens")?.as_u64()?,
                completion: u.get("completion_tokens")?.as_u64()?,
            })
        });
        Ok(ChatReply {
            text: content.to_string(),
            latency_ms,
            token_counts,
            from_cassette: false,
        })
    }
}

enum Attempt {
    Retryable(BackendError),
    Fatal(BackendError),
}

#[derive(Debug, Clone)]
pub struct RemoteExtractor {
    client: Arc<ChatClient>,
}

impl RemoteExtractor {
    pub fn new(client: Arc<ChatClient>) -> Self {
        Self { client }
    }
}

impl Extractor for RemoteExtractor {
    fn id(&self) -> String {
        format!("remote:{}", self.client.config.model)
    }

    fn extract(
        &self,
        prompt: &ComposedPrompt,
        _item: &DataItem,
    ) -> Result<RawCompletion, BackendError> {
        let reply = self.client.complete(&prompt.render())?;
        Ok(RawCompletion {
            text: reply.text,
            backend_id: self.id(),
            latency_ms: reply.latency_ms,
            token_counts: reply.token_counts,
        })
    }
}

/// Classifier pruner: asks for a single Correct / Incorrect token.
#[derive(Debug, Clone)]
pub struct RemotePruner {
    client: Arc<ChatClient>,
    composer: Arc<PromptComposer>,
}

impl RemotePruner {
    pub fn new(client: Arc<ChatClient>, composer: Arc<PromptComposer>) -> Self {
        Self { client, composer }
    }
}

impl Pruner for RemotePruner {
    fn id(&self) -> String {
        format!("remote:{}", self.client.config.model)
    }

    fn prune(
        &self,
        item: &DataItem,
        result: &ExtractionResult,
        _round: u32,
    ) -> Result<PruneVerdict, BackendError> {
        let prompt = self
            .composer
            .prune_prompt(item, result)
            .map_err(|e| BackendError::Prompt(e.to_string()))?;
        let reply = self.client.complete(&prompt)?;
        Ok(parse_verdict(&reply.text))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteDetector {
    client: Arc<ChatClient>,
    composer: Arc<PromptComposer>,
    policy: CanonPolicy,
}

impl RemoteDetector {
    pub fn new(
        client: Arc<ChatClient>,
        composer: Arc<PromptComposer>,
        policy: CanonPolicy,
    ) -> Self {
        Self {
            client,
            composer,
            policy,
        }
    }
}

impl Detector for RemoteDetector {
    fn id(&self) -> String {
        format!("remote:{}", self.client.config.model)
    }

    fn detect(
        &self,
        kind: DetectionKind,
        item: &DataItem,
        result: &ExtractionResult,
        _round: u32,
    ) -> Result<Detection, BackendError> {
        let template = match kind {
            DetectionKind::Redundant => "detect_redundant",
            DetectionKind::Missing => "detect_missing",
        };
        let prompt = self
            .composer
            .checker_prompt(template, item, result)
            .map_err(|e| BackendError::Prompt(e.to_string()))?;
        let reply = self.client.complete(&prompt)?;
        Ok(parse_detector_reply(&reply.text, item, &self.policy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn api_key_is_not_serialized_or_debug_printed() {
        let cfg = RemoteConfig {
            api_key: Some("sk-secret".into()),
            ..Default::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(!json.contains("sk-secret"));
        assert!(!format!("{cfg:?}").contains("sk-secret"));
    }

    #[test]
    fn request_hash_is_stable() {
        let client = ChatClient::new(RemoteConfig::default(), None).unwrap();
        let a = ChatClient::request_hash(&client.request_body("hello"));
        let b = ChatClient::request_hash(&client.request_body("hello"));
        let c = ChatClient::request_hash(&client.request_body("hello!"));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn replay_miss_never_touches_network() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "").unwrap();
        let cfg = RemoteConfig {
            base_url: "http://127.0.0.1:9".into(),
            ..Default::default()
        };
        let cassette = Arc::new(Cassette::open(&path, CassetteMode::Replay).unwrap());
        let client = ChatClient::new(cfg, Some(cassette)).unwrap();
        assert!(matches!(
            client.complete("x"),
            Err(BackendError::Unavailable(_))
        ));
        assert_eq!(client.http_requests(), 0);
    }

    #[test]
    fn replay_requires_existing_cassette() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent.jsonl");
        assert!(Cassette::open(&missing, CassetteMode::Replay).is_err());
        assert!(Cassette::open(&missing, CassetteMode::Record)
            .unwrap()
            .is_empty());
    }
}
