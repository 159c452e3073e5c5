use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Generic text-in, text-out service: captioner, LLM or audio-text scorer.
pub trait TextClient: Send + Sync {
    fn post(&self, body: &str) -> Result<String>;
}

impl<C: TextClient + ?Sized> TextClient for &C {
    fn post(&self, body: &str) -> Result<String> {
        (**self).post(body)
    }
}

/// Hex SHA-256 of a request body; the key mock fixtures are stored under.
pub fn body_key(body: &str) -> String {
    Sha256::digest(body.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// HTTP POST endpoint with a bearer token and bounded retries.
#[derive(Debug, Clone)]
pub struct HttpClient {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
    /// Total attempts, at least 1.
    pub attempts: u32,
    pub backoff: Duration,
}

impl HttpClient {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            token: None,
            timeout: Duration::from_secs(60),
            attempts: 3,
            backoff: Duration::from_millis(250),
        }
    }

    /// Reads the URL from `url_var`; the token, if any, from `token_var`.
    pub fn from_env(url_var: &str, token_var: &str) -> Option<Self> {
        let url = std::env::var(url_var).ok().filter(|u| !u.trim().is_empty())?;
        let mut c = Self::new(url);
        c.token = std::env::var(token_var).ok().filter(|t| !t.is_empty());
        Some(c)
    }

    fn once(&self, agent: &ureq::Agent, body: &str) -> std::result::Result<String, ureq::Error> {
        let mut req = agent.post(&self.url).header("Content-Type", "text/plain; charset=utf-8");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        req.send(body)?.body_mut().read_to_string()
    }
}

impl TextClient for HttpClient {
    fn post(&self, body: &str) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let attempts = self.attempts.max(1);
        let mut last = String::new();
        for i in 0..attempts {
            match self.once(&agent, body) {
                Ok(text) => return Ok(text),
                Err(e) => last = e.to_string(),
            }
            if i + 1 < attempts {
                std::thread::sleep(self.backoff * (i + 1));
            }
        }
        Err(Error::Client {
            attempts,
            message: format!("{}: {last}", self.url),
        })
    }
}

/// Canned responses keyed by [`body_key`], with an optional fallback.
/// Every request body is recorded for inspection.
#[derive(Debug, Default)]
pub struct MockClient {
    responses: BTreeMap<String, String>,
    fallback: Option<String>,
    requests: Mutex<Vec<String>>,
}

impl MockClient {
    /// Answers every request with `text`.
    pub fn fixed(text: impl Into<String>) -> Self {
        Self {
            fallback: Some(text.into()),
            ..Self::default()
        }
    }

    /// Answers nothing: every call is a client error.
    pub fn unavailable() -> Self {
        Self::default()
    }

    pub fn with_response(mut self, body: &str, text: impl Into<String>) -> Self {
        self.responses.insert(body_key(body), text.into());
        self
    }

    /// Loads `<key>.txt` files from `dir`; `default.txt` becomes the fallback.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut out = Self::default();
        let entries = std::fs::read_dir(dir)
            .map_err(|e| Error::Configuration(format!("mock fixtures {}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = std::fs::read_to_string(&path)?;
            if stem == "default" {
                out.fallback = Some(text);
            } else {
                out.responses.insert(stem.to_string(), text);
            }
        }
        Ok(out)
    }

    pub fn requests(&self) -> Vec<String> {
        self.requests.lock().expect("mock request log").clone()
    }
}

impl TextClient for MockClient {
    fn post(&self, body: &str) -> Result<String> {
        self.requests.lock().expect("mock request log").push(body.to_string());
        let key = body_key(body);
        self.responses
            .get(&key)
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| Error::Client {
                attempts: 1,
                message: format!("no mock response for request {}", &key[..16]),
            })
    }
}
