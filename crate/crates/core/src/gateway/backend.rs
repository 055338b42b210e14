//! Chat backends: the provider trait, retry policy and the offline backends.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::prompts::PromptName;

/// What a chat call is for. Scripts and ledgers key on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    MsgContinuation,
    DialogExtract,
    TraceEventFilter,
    TraceInit,
    Qa,
    Other,
}

impl From<PromptName> for CallKind {
    fn from(p: PromptName) -> Self {
        match p {
            PromptName::MsgContinuation => CallKind::MsgContinuation,
            PromptName::DialogExtract => CallKind::DialogExtract,
            PromptName::TraceEventFilter => CallKind::TraceEventFilter,
            PromptName::TraceInit => CallKind::TraceInit,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub kind: CallKind,
    pub prompt: &'a str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<Usage>,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Worth retrying: timeouts, 5xx, rate limits, dropped connections.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Fatal(String),
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transient(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl RetryPolicy {
    pub const fn live() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }

    pub const fn once() -> Self {
        Self {
            max_attempts: 1,
            base_delay: Duration::ZERO,
        }
    }

    /// Delay before attempt `attempt + 1`, where `attempt` counts from 1.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32 << (attempt.saturating_sub(1)).min(16))
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self::live()
    }
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    fn chat(&self, req: &ChatRequest<'_>) -> Result<ChatResponse, BackendError>;

    fn default_retry(&self) -> RetryPolicy {
        RetryPolicy::live()
    }
}

/// Returns the prompt unchanged.
#[derive(Debug, Default)]
pub struct EchoBackend;

impl ChatBackend for EchoBackend {
    fn name(&self) -> &str {
        "echo"
    }

    fn chat(&self, req: &ChatRequest<'_>) -> Result<ChatResponse, BackendError> {
        Ok(ChatResponse::text(req.prompt))
    }

    fn default_retry(&self) -> RetryPolicy {
        RetryPolicy::once()
    }
}

type ChatFn = dyn Fn(&ChatRequest<'_>) -> Result<ChatResponse, BackendError> + Send + Sync;

/// Backend driven by a closure; handy for programmatic test oracles.
pub struct FnBackend {
    name: String,
    retry: RetryPolicy,
    f: Box<ChatFn>,
}

impl FnBackend {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&ChatRequest<'_>) -> Result<ChatResponse, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            retry: RetryPolicy::once(),
            f: Box::new(f),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl ChatBackend for FnBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn chat(&self, req: &ChatRequest<'_>) -> Result<ChatResponse, BackendError> {
        (self.f)(req)
    }

    fn default_retry(&self) -> RetryPolicy {
        self.retry
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Prompt contains this text.
    Substring(String),
    /// Zero-based ordinal of the call among calls of the same kind.
    Index(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub prompt_name: CallKind,
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub matcher: Option<Matcher>,
    pub response: String,
}

impl ScriptEntry {
    pub fn new(prompt_name: CallKind, matcher: Option<Matcher>, response: impl Into<String>) -> Self {
        Self {
            prompt_name,
            matcher,
            response: response.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("script io: {0}")]
    Io(#[from] std::io::Error),
    #[error("script json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Canned responses keyed by call kind and matcher.
///
/// Lookup order for a call: an `index` entry equal to the call's ordinal within
/// its kind, then the first `substring` entry contained in the prompt, then the
/// first entry without a matcher. Never retries.
#[derive(Debug)]
pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
    counters: Mutex<HashMap<CallKind, u64>>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self {
            entries,
            counters: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_json(s: &str) -> Result<Self, ScriptError> {
        Ok(Self::new(serde_json::from_str(s)?))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ScriptError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    fn lookup(&self, kind: CallKind, ordinal: u64, prompt: &str) -> Option<&ScriptEntry> {
        let of_kind = || self.entries.iter().filter(move |e| e.prompt_name == kind);
        of_kind()
            .find(|e| e.matcher == Some(Matcher::Index(ordinal)))
            .or_else(|| {
                of_kind().find(|e| {
                    matches!(&e.matcher, Some(Matcher::Substring(s)) if prompt.contains(s.as_str()))
                })
            })
            .or_else(|| of_kind().find(|e| e.matcher.is_none()))
    }
}

impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn chat(&self, req: &ChatRequest<'_>) -> Result<ChatResponse, BackendError> {
        // Holding the lock across lookup keeps ordinal assignment and matching atomic.
        let mut counters = self.counters.lock().expect("script counters poisoned");
        let ordinal = counters.entry(req.kind).or_insert(0);
        let this = *ordinal;
        *ordinal += 1;
        match self.lookup(req.kind, this, req.prompt) {
            Some(e) => Ok(ChatResponse::text(e.response.clone())),
            None => Err(BackendError::Fatal(format!(
                "no script entry for {:?} call #{this}",
                req.kind
            ))),
        }
    }

    fn default_retry(&self) -> RetryPolicy {
        RetryPolicy::once()
    }
}
