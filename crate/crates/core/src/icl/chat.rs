use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backend::{Capability, ScoringBackend};
use crate::error::{Error, Result};

pub const DEFAULT_API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for ChatConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            temperature: 0.0,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            max_retries: 5,
            initial_backoff_ms: 500,
            max_backoff_ms: 30_000,
            max_in_flight: 4,
            timeout_secs: 60,
        }
    }
}

impl ChatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.endpoint.is_empty() || self.model.is_empty() {
            return Err(Error::config("chat backend needs an endpoint and a model"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::config(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_in_flight == 0 {
            return Err(Error::config("max_in_flight must be at least 1"));
        }
        Ok(())
    }
}

/// Generic chat-completion client. Generation only: the wire protocol
/// exposes no candidate scores.
pub struct ChatClient {
    config: ChatConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatClient")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum Attempt {
    Done(String),
    Retry { reason: String, wait: Option<Duration> },
    Fatal(String),
}

impl ChatClient {
    /// Reads the key from the configured environment variable. A missing
    /// variable is allowed (local endpoints often need none).
    pub fn from_env(config: ChatConfig) -> Result<Self> {
        let key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::new(config, key)
    }

    pub fn new(config: ChatConfig, api_key: Option<String>) -> Result<Self> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, api_key, agent })
    }

    pub fn config(&self) -> &ChatConfig {
        &self.config
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        })
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut req = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry {
                    reason: format!("transport: {}", self.redact(&e.to_string())),
                    wait: None,
                }
            }
        };
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            let wait = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|s| s.is_finite() && *s >= 0.0)
                .map(Duration::from_secs_f64);
            return Attempt::Retry {
                reason: format!("HTTP {status}"),
                wait,
            };
        }
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            let snippet: String = text.chars().take(200).collect();
            return Attempt::Fatal(format!("HTTP {status}: {}", self.redact(&snippet)));
        }
        let value: Value = match resp.body_mut().read_json() {
            Ok(v) => v,
            Err(e) => return Attempt::Fatal(format!("malformed response body: {e}")),
        };
        match value.pointer("/choices/0/message/content").and_then(Value::as_str) {
            Some(s) => Attempt::Done(s.to_owned()),
            None => Attempt::Fatal("response has no choices[0].message.content".into()),
        }
    }

    fn redact(&self, text: &str) -> String {
        match &self.api_key {
            Some(k) => text.replace(k.as_str(), "<redacted>"),
            None => text.to_owned(),
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .config
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.config.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

impl ScoringBackend for ChatClient {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn capability(&self) -> Capability {
        Capability {
            scorer: false,
            generator: true,
        }
    }

    fn generate(&self, prompt: &str) -> Result<String> {
        let body = self.request_body(prompt);
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            match self.attempt(&body) {
                Attempt::Done(s) => return Ok(s),
                Attempt::Fatal(msg) => return Err(Error::Transport(msg)),
                Attempt::Retry { reason, wait } => {
                    log::warn!("chat request failed ({reason}), attempt {}", attempt + 1);
                    last = reason;
                    if attempt < self.config.max_retries {
                        thread::sleep(wait.unwrap_or_else(|| self.backoff(attempt)).min(Duration::from_millis(
                            self.config.max_backoff_ms,
                        )));
                    }
                }
            }
        }
        Err(Error::Transport(format!(
            "giving up after {} attempts: {last}",
            self.config.max_retries + 1
        )))
    }

    fn generate_batch(&self, prompts: &[String]) -> Vec<Result<String>> {
        let slots: Vec<Mutex<Option<Result<String>>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_in_flight.min(prompts.len().max(1));
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= prompts.len() {
                        break;
                    }
                    let r = self.generate(&prompts[i]);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every slot is filled"))
            .collect()
    }
}
