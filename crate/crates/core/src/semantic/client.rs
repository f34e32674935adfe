//! Summarization clients: identity stub, fixture replay, and a remote
//! chat-completions client with retry, rate limiting and fixture recording.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompt::{prompt_sha256, PromptText};
use crate::error::{Error, Result};

pub const FIXTURE_FILE: &str = "fixtures.jsonl";

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &PromptText) -> Result<String>;
}

pub fn summarize(prompt: &PromptText, client: &dyn LlmClient) -> Result<String> {
    client.complete(prompt)
}

/// Summarizes `prompts` with at most `max_in_flight` concurrent requests.
/// Results are returned in input order.
pub fn summarize_batch(
    prompts: &[PromptText],
    client: &dyn LlmClient,
    max_in_flight: usize,
) -> Vec<Result<String>> {
    let workers = max_in_flight.clamp(1, prompts.len().max(1));
    if workers == 1 {
        return prompts.iter().map(|p| client.complete(p)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<String>>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= prompts.len() {
                    break;
                }
                let r = client.complete(&prompts[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every prompt answered"))
        .collect()
}

/// Returns the prompt body unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityStub;

impl LlmClient for IdentityStub {
    fn complete(&self, prompt: &PromptText) -> Result<String> {
        Ok(prompt.body.clone())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct FixtureLine {
    pub prompt_sha256: String,
    pub response: String,
}

/// Answers from recorded fixtures keyed by prompt hash; never touches the
/// network.
#[derive(Clone, Debug, Default)]
pub struct ReplayClient {
    responses: HashMap<String, String>,
}

impl ReplayClient {
    pub fn from_lines(lines: impl IntoIterator<Item = FixtureLine>) -> Self {
        Self {
            responses: lines.into_iter().map(|l| (l.prompt_sha256, l.response)).collect(),
        }
    }

    /// Loads `<dir>/fixtures.jsonl`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(FIXTURE_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            lines.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), idx + 1)))?,
            );
        }
        Ok(Self::from_lines(lines))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl LlmClient for ReplayClient {
    fn complete(&self, prompt: &PromptText) -> Result<String> {
        let hash = prompt.sha256();
        self.responses.get(&hash).cloned().ok_or(Error::ReplayMiss(hash))
    }
}

/// Appends `{prompt_sha256, response}` lines to `<dir>/fixtures.jsonl`.
#[derive(Debug)]
pub struct FixtureRecorder {
    path: PathBuf,
    file: Mutex<File>,
}

impl FixtureRecorder {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(FIXTURE_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn record(&self, body: &str, response: &str) -> Result<()> {
        let line = serde_json::to_string(&FixtureLine {
            prompt_sha256: prompt_sha256(body),
            response: response.to_owned(),
        })
        .expect("serialize fixture");
        let mut f = self.file.lock().expect("fixture lock");
        writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Records every response of an inner client.
pub struct RecordingClient<C> {
    pub inner: C,
    pub recorder: FixtureRecorder,
}

impl<C: LlmClient> LlmClient for RecordingClient<C> {
    fn complete(&self, prompt: &PromptText) -> Result<String> {
        let text = self.inner.complete(prompt)?;
        self.recorder.record(&prompt.body, &text)?;
        Ok(text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying (timeouts, 429, 5xx).
    Transient(String),
    Fatal(String),
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, body: &Value, bearer: Option<&str>) -> Result<Value, TransportError>;
}

/// Blocking HTTP transport.
#[derive(Debug)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, body: &Value, bearer: Option<&str>) -> Result<Value, TransportError> {
        let mut req = self.agent.post(url).set("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body.clone()) {
            Ok(resp) => resp
                .into_json::<Value>()
                .map_err(|e| TransportError::Transient(format!("bad response body: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {text}");
                if code == 429 || code >= 500 {
                    Err(TransportError::Transient(msg))
                } else {
                    Err(TransportError::Fatal(msg))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(TransportError::Transient(t.to_string())),
        }
    }
}

pub trait Clock: Send + Sync {
    /// Monotonic time since an arbitrary origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): base · 2^(retry−1), capped.
    pub fn delay(&self, retry: usize) -> Duration {
        let factor = 1u32 << (retry.saturating_sub(1)).min(20);
        (self.base_delay * factor).min(self.max_delay)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub min_interval: Duration,
    pub retry: RetryPolicy,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            temperature: 0.0,
            top_p: 0.001,
            min_interval: Duration::ZERO,
            retry: RetryPolicy::default(),
        }
    }

    /// Reads `SEQREC_LLM_ENDPOINT`, `SEQREC_LLM_MODEL`, `SEQREC_LLM_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var("SEQREC_LLM_ENDPOINT")
            .map_err(|_| Error::Config("SEQREC_LLM_ENDPOINT is not set".into()))?;
        let model = std::env::var("SEQREC_LLM_MODEL").unwrap_or_else(|_| "deepseek-chat".into());
        let mut cfg = Self::new(endpoint, model);
        cfg.api_key = std::env::var("SEQREC_LLM_API_KEY").ok();
        Ok(cfg)
    }
}

pub struct RemoteClient {
    config: RemoteConfig,
    transport: Box<dyn Transport>,
    clock: Box<dyn Clock>,
    recorder: Option<FixtureRecorder>,
    next_slot: Mutex<Duration>,
    attempts: AtomicUsize,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig, transport: Box<dyn Transport>, clock: Box<dyn Clock>) -> Self {
        Self {
            config,
            transport,
            clock,
            recorder: None,
            next_slot: Mutex::new(Duration::ZERO),
            attempts: AtomicUsize::new(0),
        }
    }

    pub fn with_recorder(mut self, recorder: FixtureRecorder) -> Self {
        self.recorder = Some(recorder);
        self
    }

    /// Total HTTP attempts made so far.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::Relaxed)
    }

    pub fn request_body(&self, prompt: &PromptText) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt.body}],
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
        })
    }

    fn wait_for_slot(&self) {
        if self.config.min_interval.is_zero() {
            return;
        }
        let wait = {
            let mut slot = self.next_slot.lock().expect("rate lock");
            let now = self.clock.now();
            let start = (*slot).max(now);
            *slot = start + self.config.min_interval;
            start - now
        };
        if !wait.is_zero() {
            self.clock.sleep(wait);
        }
    }

    fn extract(resp: &Value) -> Option<String> {
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
    }
}

impl LlmClient for RemoteClient {
    fn complete(&self, prompt: &PromptText) -> Result<String> {
        let body = self.request_body(prompt);
        let policy = self.config.retry;
        let mut last = String::new();
        for attempt in 1..=policy.max_attempts.max(1) {
            if attempt > 1 {
                self.clock.sleep(policy.delay(attempt - 1));
            }
            self.wait_for_slot();
            self.attempts.fetch_add(1, Ordering::Relaxed);
            match self
                .transport
                .post_json(&self.config.endpoint, &body, self.config.api_key.as_deref())
            {
                Ok(resp) => match Self::extract(&resp) {
                    Some(text) => {
                        if let Some(rec) = &self.recorder {
                            rec.record(&prompt.body, &text)?;
                        }
                        return Ok(text);
                    }
                    None => last = format!("response without message content: {resp}"),
                },
                Err(TransportError::Transient(msg)) => {
                    tracing::warn!(attempt, error = %msg, "transient summarization failure");
                    last = msg;
                }
                Err(TransportError::Fatal(msg)) => {
                    return Err(Error::Remote {
                        attempts: attempt,
                        message: msg,
                    })
                }
            }
        }
        Err(Error::Remote {
            attempts: policy.max_attempts.max(1),
            message: last,
        })
    }
}


#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::testing::*;
    use super::*;
    use crate::semantic::prompt::PromptKind;

    fn prompt(body: &str) -> PromptText {
        PromptText {
            kind: PromptKind::User,
            body: body.into(),
        }
    }

    #[test]
    fn identity_stub_echoes() {
        assert_eq!(summarize(&prompt("X"), &IdentityStub).unwrap(), "X");
    }

    #[test]
    fn remote_retries_transient_failures_then_records() {
        let dir = tempfile::tempdir().unwrap();
        let transport = Arc::new(FlakyTransport::new(2));
        let clock = Arc::new(FakeClock::default());
        let client = RemoteClient::new(
            RemoteConfig::new("http://fake/v1/chat/completions", "m"),
            Box::new(transport.clone()),
            Box::new(clock.clone()),
        )
        .with_recorder(FixtureRecorder::open(dir.path()).unwrap());

        let out = client.complete(&prompt("hello")).unwrap();
        assert_eq!(out, "HELLO");
        assert_eq!(transport.calls.load(Ordering::SeqCst), 3);
        assert_eq!(client.attempts(), 3);
        // exponential backoff: 0.5 s then 1 s
        assert_eq!(
            *clock.sleeps.lock().unwrap(),
            vec![Duration::from_millis(500), Duration::from_millis(1000)]
        );
        let body = &transport.bodies.lock().unwrap()[0];
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["top_p"], 0.001);

        // replay answers the same prompt with no transport at all
        let replay = ReplayClient::load(dir.path()).unwrap();
        assert_eq!(replay.complete(&prompt("hello")).unwrap(), "HELLO");
        assert_eq!(transport.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn remote_gives_up_after_policy_attempts() {
        let transport = Arc::new(FlakyTransport::new(100));
        let mut cfg = RemoteConfig::new("http://fake", "m");
        cfg.retry.max_attempts = 3;
        let client = RemoteClient::new(cfg, Box::new(transport.clone()), Box::new(Arc::new(FakeClock::default())));
        match client.complete(&prompt("x")) {
            Err(Error::Remote { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replay_miss_names_hash() {
        let replay = ReplayClient::default();
        let p = prompt("never recorded");
        match replay.complete(&p) {
            Err(Error::ReplayMiss(h)) => assert_eq!(h, p.sha256()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rate_limit_spaces_requests() {
        let transport = Arc::new(FlakyTransport::new(0));
        let clock = Arc::new(FakeClock::default());
        let mut cfg = RemoteConfig::new("http://fake", "m");
        cfg.min_interval = Duration::from_millis(100);
        let client = RemoteClient::new(cfg, Box::new(transport), Box::new(clock.clone()));
        for _ in 0..3 {
            client.complete(&prompt("a")).unwrap();
        }
        assert_eq!(clock.now(), Duration::from_millis(200));
    }

    #[test]
    fn batch_preserves_order() {
        let prompts: Vec<PromptText> = (0..20).map(|i| prompt(&format!("p{i}"))).collect();
        let out = summarize_batch(&prompts, &IdentityStub, 8);
        for (i, r) in out.into_iter().enumerate() {
            assert_eq!(r.unwrap(), format!("p{i}"));
        }
    }
}
