//! Chat-completions client with a content-addressed disk cache, a
//! token-bucket rate limiter, bounded retries and cost counters.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatClientConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    pub max_retries: u32,
    pub timeout_secs: f64,
    /// Sustained request rate; bursts up to `burst` requests.
    pub requests_per_second: f64,
    pub burst: u32,
    /// First backoff delay, doubled per retry.
    pub backoff_ms: u64,
    pub cache_dir: Option<PathBuf>,
    pub temperature: f64,
    /// Environment variable holding a bearer token, if any.
    pub api_key_env: Option<String>,
    pub system_prompt: Option<String>,
}

impl Default for ChatClientConfig {
    fn default() -> Self {
        ChatClientConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            max_retries: 3,
            timeout_secs: 60.0,
            requests_per_second: 5.0,
            burst: 5,
            backoff_ms: 500,
            cache_dir: None,
            temperature: 0.0,
            api_key_env: Some("OPENAI_API_KEY".into()),
            system_prompt: None,
        }
    }
}

impl ChatClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.requests_per_second > 0.0) || self.burst == 0 {
            return Err(Error::Config("rate limit must be positive".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config("timeout must be positive".into()));
        }
        if self.model.is_empty() {
            return Err(Error::Config("model name is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Failure of one backend call.
#[derive(Debug)]
pub enum CallError {
    /// Worth retrying: transport errors, 429, 5xx.
    Transient(String),
    Fatal(String),
}

pub trait ChatBackend: Send + Sync {
    fn call(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, CallError>;
}

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &ChatClientConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build();
        let api_key = config.api_key_env.as_ref().and_then(|k| std::env::var(k).ok());
        HttpBackend {
            agent,
            endpoint: config.endpoint.clone(),
            api_key,
        }
    }
}

impl ChatBackend for HttpBackend {
    fn call(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, CallError> {
        let mut r = self.agent.post(&self.endpoint).set("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            r = r.set("Authorization", &format!("Bearer {k}"));
        }
        let body = serde_json::to_value(req).map_err(|e| CallError::Fatal(e.to_string()))?;
        let resp = match r.send_json(body) {
            Ok(resp) => resp,
            Err(ureq::Error::Status(code, resp)) => {
                let msg = format!("HTTP {code}: {}", resp.into_string().unwrap_or_default());
                return Err(if code == 429 || code >= 500 {
                    CallError::Transient(msg)
                } else {
                    CallError::Fatal(msg)
                });
            }
            Err(e) => return Err(CallError::Transient(e.to_string())),
        };
        let v: serde_json::Value = resp.into_json().map_err(|e| CallError::Transient(e.to_string()))?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| CallError::Fatal(format!("response without choices[0].message.content: {v}")))?
            .to_string();
        Ok(ChatResponse {
            text,
            prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        })
    }
}

/// What the mock has served; the client's counters must agree with it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockLedger {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

type Responder = dyn Fn(&ChatRequest, u64) -> std::result::Result<String, CallError> + Send + Sync;

/// In-process backend. The responder sees the request and the call number;
/// tokens are counted as whitespace-separated words.
pub struct MockBackend {
    responder: Box<Responder>,
    ledger: Mutex<MockLedger>,
}

impl MockBackend {
    pub fn new(responder: impl Fn(&ChatRequest, u64) -> std::result::Result<String, CallError> + Send + Sync + 'static) -> Self {
        MockBackend {
            responder: Box::new(responder),
            ledger: Mutex::new(MockLedger::default()),
        }
    }

    /// Echo the text that follows the instruction.
    pub fn identity() -> Self {
        Self::new(|req, _| {
            let user = &req.messages.last().expect("a user message").content;
            Ok(user.split_once("\n\n").map_or(user.as_str(), |(_, t)| t).to_string())
        })
    }

    /// Always answer `reply`.
    pub fn constant(reply: impl Into<String>) -> Self {
        let reply = reply.into();
        Self::new(move |_, _| Ok(reply.clone()))
    }

    pub fn ledger(&self) -> MockLedger {
        self.ledger.lock().expect("ledger lock").clone()
    }

    pub fn count_tokens(s: &str) -> u64 {
        s.split_whitespace().count() as u64
    }
}

impl ChatBackend for MockBackend {
    fn call(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, CallError> {
        let n = {
            let mut l = self.ledger.lock().expect("ledger lock");
            l.calls += 1;
            l.calls
        };
        let text = (self.responder)(req, n)?;
        let prompt_tokens = req.messages.iter().map(|m| Self::count_tokens(&m.content)).sum();
        let completion_tokens = Self::count_tokens(&text);
        let mut l = self.ledger.lock().expect("ledger lock");
        l.prompt_tokens += prompt_tokens;
        l.completion_tokens += completion_tokens;
        Ok(ChatResponse {
            text,
            prompt_tokens,
            completion_tokens,
        })
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn call(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, CallError> {
        (**self).call(req)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    /// Backend calls, including failed attempts.
    pub requests: u64,
    pub cache_hits: u64,
    pub failures: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

struct TokenBucket {
    capacity: f64,
    tokens: f64,
    rate: f64,
    last: Instant,
}

impl TokenBucket {
    fn new(rate: f64, burst: u32) -> Self {
        TokenBucket {
            capacity: burst as f64,
            tokens: burst as f64,
            rate,
            last: Instant::now(),
        }
    }

    /// Take one token, or return how long to wait for it.
    fn try_take(&mut self) -> Option<Duration> {
        let now = Instant::now();
        self.tokens = (self.tokens + now.duration_since(self.last).as_secs_f64() * self.rate).min(self.capacity);
        self.last = now;
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            None
        } else {
            Some(Duration::from_secs_f64((1.0 - self.tokens) / self.rate))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    text: String,
    prompt_tokens: u64,
    completion_tokens: u64,
    timestamp: u64,
}

pub struct ChatClient {
    config: ChatClientConfig,
    backend: Box<dyn ChatBackend>,
    bucket: Mutex<TokenBucket>,
    costs: Mutex<CostCounters>,
}

impl ChatClient {
    pub fn new(config: ChatClientConfig, backend: Box<dyn ChatBackend>) -> Result<Self> {
        config.validate()?;
        if let Some(dir) = &config.cache_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(ChatClient {
            bucket: Mutex::new(TokenBucket::new(config.requests_per_second, config.burst)),
            costs: Mutex::new(CostCounters::default()),
            config,
            backend,
        })
    }

    pub fn http(config: ChatClientConfig) -> Result<Self> {
        let backend = HttpBackend::new(&config);
        Self::new(config, Box::new(backend))
    }

    pub fn config(&self) -> &ChatClientConfig {
        &self.config
    }

    pub fn costs(&self) -> CostCounters {
        self.costs.lock().expect("cost lock").clone()
    }

    /// `sha256(model, prompt id, sha256(text))`, hex.
    pub fn cache_key(&self, prompt_id: &str, text: &str) -> String {
        let text_hash = Sha256::digest(text.as_bytes());
        let mut h = Sha256::new();
        h.update(self.config.model.as_bytes());
        h.update([0u8]);
        h.update(prompt_id.as_bytes());
        h.update([0u8]);
        h.update(text_hash);
        hex::encode(h.finalize())
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.config.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn cache_get(&self, key: &str) -> Option<CacheRecord> {
        let path = self.cache_path(key)?;
        let data = std::fs::read(&path).ok()?;
        serde_json::from_slice::<CacheRecord>(&data).ok().filter(|r| r.key == key)
    }

    fn cache_put(&self, rec: &CacheRecord) -> Result<()> {
        let Some(path) = self.cache_path(&rec.key) else {
            return Ok(());
        };
        // write then rename, so readers never see a partial record
        let tmp = path.with_extension(format!("tmp{:?}", std::thread::current().id()).replace(['(', ')'], ""));
        std::fs::write(&tmp, serde_json::to_vec(rec)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    fn wait_for_slot(&self) {
        loop {
            let wait = self.bucket.lock().expect("bucket lock").try_take();
            match wait {
                None => return,
                Some(d) => std::thread::sleep(d),
            }
        }
    }

    /// One completion for a single user message. Cache hits skip the
    /// backend entirely.
    pub fn complete(&self, prompt_id: &str, user: &str) -> Result<ChatResponse> {
        let key = self.cache_key(prompt_id, user);
        if let Some(rec) = self.cache_get(&key) {
            self.costs.lock().expect("cost lock").cache_hits += 1;
            return Ok(ChatResponse {
                text: rec.text,
                prompt_tokens: rec.prompt_tokens,
                completion_tokens: rec.completion_tokens,
            });
        }
        let mut messages = Vec::new();
        if let Some(s) = &self.config.system_prompt {
            messages.push(Message {
                role: "system".into(),
                content: s.clone(),
            });
        }
        messages.push(Message {
            role: "user".into(),
            content: user.to_string(),
        });
        let req = ChatRequest {
            model: self.config.model.clone(),
            messages,
            temperature: self.config.temperature,
        };
        let mut last_err = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            self.wait_for_slot();
            let result = self.backend.call(&req);
            let mut c = self.costs.lock().expect("cost lock");
            c.requests += 1;
            match result {
                Ok(resp) => {
                    c.prompt_tokens += resp.prompt_tokens;
                    c.completion_tokens += resp.completion_tokens;
                    drop(c);
                    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
                    self.cache_put(&CacheRecord {
                        key,
                        text: resp.text.clone(),
                        prompt_tokens: resp.prompt_tokens,
                        completion_tokens: resp.completion_tokens,
                        timestamp,
                    })?;
                    return Ok(resp);
                }
                Err(CallError::Transient(e)) => {
                    c.failures += 1;
                    log::warn!("attempt {} failed: {e}", attempt + 1);
                    last_err = e;
                }
                Err(CallError::Fatal(e)) => {
                    c.failures += 1;
                    return Err(Error::Endpoint(e));
                }
            }
        }
        Err(Error::Endpoint(format!(
            "giving up after {} attempts: {last_err}",
            self.config.max_retries + 1
        )))
    }
}

/// Directory entries of a cache, for inspection.
pub fn cache_entries(dir: &Path) -> Result<usize> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    Ok(rd
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn cfg(dir: Option<PathBuf>) -> ChatClientConfig {
        ChatClientConfig {
            cache_dir: dir,
            backoff_ms: 0,
            requests_per_second: 1e6,
            burst: 1000,
            api_key_env: None,
            ..Default::default()
        }
    }

    #[test]
    fn cache_hit_makes_no_call() {
        let dir = tempfile::tempdir().unwrap();
        let mock = Arc::new(MockBackend::identity());
        let c = ChatClient::new(cfg(Some(dir.path().into())), Box::new(mock.clone())).unwrap();
        let a = c.complete("p", "do it\n\nhello world").unwrap();
        let b = c.complete("p", "do it\n\nhello world").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.text, "hello world");
        assert_eq!(mock.ledger().calls, 1);
        assert_eq!(c.costs().cache_hits, 1);
        assert_eq!(cache_entries(dir.path()).unwrap(), 1);
    }

    #[test]
    fn transient_errors_are_retried() {
        let mock = Arc::new(MockBackend::new(|_, n| {
            if n < 3 {
                Err(CallError::Transient("busy".into()))
            } else {
                Ok("fine".into())
            }
        }));
        let c = ChatClient::new(cfg(None), Box::new(mock.clone())).unwrap();
        assert_eq!(c.complete("p", "x").unwrap().text, "fine");
        assert_eq!(c.costs().requests, 3);
        assert_eq!(c.costs().failures, 2);
    }

    #[test]
    fn retries_are_bounded() {
        let mock = MockBackend::new(|_, _| Err(CallError::Transient("down".into())));
        let c = ChatClient::new(
            ChatClientConfig {
                max_retries: 2,
                ..cfg(None)
            },
            Box::new(mock),
        )
        .unwrap();
        assert!(matches!(c.complete("p", "x"), Err(Error::Endpoint(_))));
        assert_eq!(c.costs().requests, 3);
    }

    #[test]
    fn key_depends_on_model_prompt_and_text() {
        let c = ChatClient::new(cfg(None), Box::new(MockBackend::identity())).unwrap();
        let k = c.cache_key("a", "t");
        assert_ne!(k, c.cache_key("b", "t"));
        assert_ne!(k, c.cache_key("a", "u"));
        let c2 = ChatClient::new(
            ChatClientConfig {
                model: "other".into(),
                ..cfg(None)
            },
            Box::new(MockBackend::identity()),
        )
        .unwrap();
        assert_ne!(k, c2.cache_key("a", "t"));
    }
}
