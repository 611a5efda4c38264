//! Chat-completions client over HTTP with an on-disk response cache.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::backend::{BackendError, PolicyBackend};

const ATTEMPTS: u32 = 3;
const BODY_EXCERPT: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpChatConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub cache_dir: Option<PathBuf>,
    /// First backoff delay; doubles per retry.
    pub retry_base_ms: u64,
    pub timeout_secs: u64,
}

impl HttpChatConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: 1.0,
            max_tokens: None,
            api_key_env: None,
            cache_dir: None,
            retry_base_ms: 500,
            timeout_secs: 120,
        }
    }
}

pub struct HttpChatBackend {
    cfg: HttpChatConfig,
    agent: ureq::Agent,
    network_calls: AtomicUsize,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

fn excerpt(body: &str) -> String {
    body.chars().take(BODY_EXCERPT).collect()
}

impl HttpChatBackend {
    pub fn new(cfg: HttpChatConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Self {
            cfg,
            agent,
            network_calls: AtomicUsize::new(0),
        }
    }

    /// HTTP requests actually sent, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::Relaxed)
    }

    fn cache_key(&self, prompt: &str, n: usize) -> String {
        let mut h = Sha256::new();
        for part in [
            prompt,
            &n.to_string(),
            &self.cfg.model,
            &format!("{:?}", self.cfg.temperature),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.cfg.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn read_cache(&self, key: &str) -> Result<Option<Vec<String>>, BackendError> {
        let Some(path) = self.cache_path(key) else {
            return Ok(None);
        };
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| BackendError::Cache(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(BackendError::Cache(format!("{}: {e}", path.display()))),
        }
    }

    fn write_cache(&self, key: &str, texts: &[String]) -> Result<(), BackendError> {
        let Some(path) = self.cache_path(key) else {
            return Ok(());
        };
        let io = |e: std::io::Error| BackendError::Cache(format!("{}: {e}", path.display()));
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string(texts).expect("strings serialize")).map_err(io)?;
        std::fs::rename(&tmp, &path).map_err(io)
    }

    fn request(&self, prompt: &str, n: usize, seed: u64) -> Result<Vec<String>, BackendError> {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "n": n,
            "temperature": self.cfg.temperature,
            "seed": seed,
        });
        if let Some(m) = self.cfg.max_tokens {
            body["max_tokens"] = json!(m);
        }
        let key = self
            .cfg
            .api_key_env
            .as_ref()
            .and_then(|var| std::env::var(var).ok());

        let mut last = String::new();
        for attempt in 0..ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.retry_base_ms << (attempt - 1)));
            }
            self.network_calls.fetch_add(1, Ordering::Relaxed);
            let mut req = self.agent.post(&self.cfg.endpoint);
            if let Some(k) = &key {
                req = req.header("Authorization", &format!("Bearer {k}"));
            }
            let mut resp = match req.send_json(&body) {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            if status == 429 || status >= 500 {
                last = format!("status {status}: {}", excerpt(&text));
                if attempt + 1 == ATTEMPTS {
                    return Err(BackendError::Status {
                        status,
                        body: excerpt(&text),
                    });
                }
                continue;
            }
            if !(200..300).contains(&status) {
                return Err(BackendError::Status {
                    status,
                    body: excerpt(&text),
                });
            }
            let parsed: ChatResponse =
                serde_json::from_str(&text).map_err(|e| BackendError::Malformed(format!("{e}: {}", excerpt(&text))))?;
            return Ok(parsed
                .choices
                .into_iter()
                .map(|c| c.message.content.unwrap_or_default())
                .collect());
        }
        Err(BackendError::Transport {
            attempts: ATTEMPTS,
            message: last,
        })
    }
}

impl PolicyBackend for HttpChatBackend {
    fn propose(&self, prompt: &str, n: usize, seed: u64) -> Result<Vec<String>, BackendError> {
        let key = self.cache_key(prompt, n);
        if let Some(hit) = self.read_cache(&key)? {
            return Ok(hit);
        }
        let texts = self.request(prompt, n, seed)?;
        self.write_cache(&key, &texts)?;
        Ok(texts)
    }
}
