use std::sync::atomic::{AtomicUsize, Ordering};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("prompt not understood: {0}")]
    Prompt(String),
    #[error("cache i/o: {0}")]
    Cache(String),
}

/// Anything that turns a prompt into `n` completions.
///
/// Deterministic backends must return identical lists for identical
/// `(prompt, n, seed)`.
pub trait PolicyBackend: Send + Sync {
    fn propose(&self, prompt: &str, n: usize, seed: u64) -> Result<Vec<String>, BackendError>;
}

impl<B: PolicyBackend + ?Sized> PolicyBackend for &B {
    fn propose(&self, prompt: &str, n: usize, seed: u64) -> Result<Vec<String>, BackendError> {
        (**self).propose(prompt, n, seed)
    }
}

impl<B: PolicyBackend + ?Sized> PolicyBackend for Box<B> {
    fn propose(&self, prompt: &str, n: usize, seed: u64) -> Result<Vec<String>, BackendError> {
        (**self).propose(prompt, n, seed)
    }
}

/// One row of a script: a matcher and the responses it cycles through.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub pattern: String,
    /// Treat `pattern` as a regular expression instead of a substring.
    #[serde(default)]
    pub regex: bool,
    pub responses: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScriptFile {
    entries: Vec<ScriptEntry>,
    #[serde(default)]
    default: String,
}

#[derive(Clone)]
enum Matcher {
    Substring(String),
    Pattern(Regex),
}

impl Matcher {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Substring(s) => prompt.contains(s.as_str()),
            Matcher::Pattern(r) => r.is_match(prompt),
        }
    }
}

/// Table-driven test double. The first entry whose matcher hits the prompt
/// answers with its responses in order, wrapping around when `n` exceeds the
/// list. Output depends only on `(prompt, n)`.
#[derive(Clone)]
pub struct ScriptedBackend {
    entries: Vec<(Matcher, Vec<String>)>,
    default: String,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>, default: impl Into<String>) -> Result<Self, regex::Error> {
        let entries = entries
            .into_iter()
            .map(|e| {
                let m = if e.regex {
                    Matcher::Pattern(Regex::new(&e.pattern)?)
                } else {
                    Matcher::Substring(e.pattern)
                };
                Ok((m, e.responses))
            })
            .collect::<Result<_, regex::Error>>()?;
        Ok(Self {
            entries,
            default: default.into(),
        })
    }

    /// Shorthand for substring matchers.
    pub fn from_pairs<I, S>(pairs: I, default: &str) -> Self
    where
        I: IntoIterator<Item = (S, Vec<S>)>,
        S: Into<String>,
    {
        let entries = pairs
            .into_iter()
            .map(|(p, r)| ScriptEntry {
                pattern: p.into(),
                regex: false,
                responses: r.into_iter().map(Into::into).collect(),
            })
            .collect();
        Self::new(entries, default).expect("substring matchers never fail")
    }

    /// Loads `{"entries": [{"match": .., "regex": .., "responses": [..]}], "default": ..}`.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let file: ScriptFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Self::new(file.entries, file.default).map_err(|e| e.to_string())
    }
}

impl PolicyBackend for ScriptedBackend {
    fn propose(&self, prompt: &str, n: usize, _seed: u64) -> Result<Vec<String>, BackendError> {
        let hit = self
            .entries
            .iter()
            .find(|(m, r)| !r.is_empty() && m.matches(prompt));
        Ok(match hit {
            Some((_, responses)) => responses.iter().cycle().take(n).cloned().collect(),
            None => vec![self.default.clone(); n],
        })
    }
}

/// Wraps a backend and counts calls and returned completions.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
    completions: AtomicUsize,
}

impl<B> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            completions: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn completions(&self) -> usize {
        self.completions.load(Ordering::SeqCst)
    }
}

impl<B: PolicyBackend> PolicyBackend for CountingBackend<B> {
    fn propose(&self, prompt: &str, n: usize, seed: u64) -> Result<Vec<String>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let out = self.inner.propose(prompt, n, seed)?;
        self.completions.fetch_add(out.len(), Ordering::SeqCst);
        Ok(out)
    }
}
